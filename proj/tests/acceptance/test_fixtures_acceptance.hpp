// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "phonecot/augment.hpp"
#include "phonecot/corpus.hpp"
#include "phonecot/speech.hpp"

namespace phonecot::acceptance {

// Shared world/codebook/vocabulary for the property criteria.
struct Fixture {
    WorldSpec world;
    SpeechSynthesizer synth;
    Codebook codebook;
    Vocabulary vocab;

    Fixture() : world(generate_world(7, WorldConfig{})), synth(world.inventory, world.config.seed) {
        std::vector<FrameMatrix> parts;
        Rng rng(400);
        for (const auto& f : world.families)
            for (const auto& l : f.languages) {
                if (l.tier != Tier::High) continue;
                for (int i = 0; i < 20; ++i) {
                    auto s = sample_sentence(world, l.code, rng);
                    parts.push_back(synth.synthesize(s.source_phonemes, rng.u64(), rng));
                }
            }
        Eigen::Index rows = 0;
        for (auto& p : parts) rows += p.rows();
        FrameMatrix frames(rows, parts[0].cols());
        Eigen::Index at = 0;
        for (auto& p : parts) {
            frames.middleRows(at, p.rows()) = p;
            at += p.rows();
        }
        codebook = train_codebook(frames, 32, 25, 3);
        vocab = build_world_vocabulary(world, size_t(codebook.k()));
    }

    static const Fixture& get() {
        static Fixture f;
        return f;
    }
};

}  // namespace phonecot::acceptance
