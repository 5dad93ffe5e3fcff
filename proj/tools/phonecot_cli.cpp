// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end for the phonecot pipeline: world generation,
// codebook training, dataset construction, curriculum training, controlled
// decoding, scoring, and the full experiment roster.

#include <CLI11.hpp>

#include "phonecot/pipeline.hpp"

using namespace phonecot;

namespace {

struct CliArgs {
    std::string config;
    std::string out = "out";
    int64_t seed = -1;
    int stage = 0;
    std::string variant = "cot_ph";
    std::string mode;
    bool force = false;
};

Workspace make_workspace(const CliArgs& args) {
    Workspace ws;
    ws.cfg = args.config.empty() ? RunConfig{} : RunConfig::from_file(args.config);
    if (args.seed >= 0) ws.cfg.world.seed = uint64_t(args.seed);
    ws.out = args.out;
    ws.force = args.force;
    return ws;
}

int dispatch(const std::string& command, const CliArgs& args) {
    try {
        Workspace ws = make_workspace(args);
        if (command == "world") {
            cmd_world(ws);
        } else if (command == "codebook") {
            cmd_world(ws);
            cmd_codebook(ws);
        } else if (command == "data") {
            const auto variant = variant_from(args.variant);
            if (args.stage != 0) {
                cmd_data(ws, args.stage, variant);
            } else {
                for (int stage = 1; stage <= 3; ++stage) cmd_data(ws, stage, variant);
            }
        } else if (command == "train") {
            require(args.stage >= 1 && args.stage <= 3, "train: pass --stage 1|2|3");
            cmd_train(ws, args.stage, variant_from(args.variant));
        } else if (command == "decode") {
            require(!args.mode.empty(), "decode: pass --mode direct|cot|cot_ph|no_ph");
            cmd_decode(ws, args.variant, gen_mode_from(args.mode));
        } else if (command == "eval") {
            cmd_eval(ws);
        } else if (command == "experiment") {
            cmd_experiment(ws);
        } else {
            std::cerr << "unknown command: " << command << "\n";
            return 1;
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return ConfigError::kExitCode;
    } catch (const DigestMismatch& e) {
        std::cerr << "digest mismatch: " << e.what() << "\n";
        return DigestMismatch::kExitCode;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return MissingArtifact::kExitCode;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"phonecot: phoneme-augmented chain-of-thought speech translation sandbox"};
    app.require_subcommand(1);

    CliArgs args;
    std::vector<CLI::App*> subs;
    for (const char* name : {"world", "codebook", "data", "train", "decode", "eval", "experiment"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", args.config, "configuration file (key = value sections)");
        sub->add_option("--seed", args.seed, "override the world seed");
        sub->add_option("--out", args.out, "artifact directory");
        sub->add_option("--stage", args.stage, "curriculum stage (1, 2, or 3)");
        sub->add_option("--variant", args.variant,
                        "system variant: direct|cot|cot_ph|cot_ph_pda|cot_ph_dps");
        sub->add_option("--mode", args.mode, "decoding mode: direct|cot|cot_ph|no_ph");
        sub->add_flag("--force", args.force, "rebuild artifacts even on digest mismatch");
        subs.push_back(sub);
    }

    CLI11_PARSE(app, argc, argv);
    for (auto* sub : subs)
        if (sub->parsed()) return dispatch(sub->get_name(), args);
    return 1;
}
