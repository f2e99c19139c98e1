// Experiment runner: train / diagnose / ablate over config-driven toy
// transformer runs.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sinklab/runner.hpp"

namespace {

int exit_code_for(sinklab::ErrorCategory cat) {
    using sinklab::ErrorCategory;
    switch (cat) {
        case ErrorCategory::config: return 2;
        case ErrorCategory::data: return 3;
        case ErrorCategory::numeric: return 4;
        case ErrorCategory::io: return 5;
        case ErrorCategory::container: return 6;
        case ErrorCategory::dimension:
        case ErrorCategory::contract: return 7;
        case ErrorCategory::convergence: return 8;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy transformer lab: training and residual-stream diagnostics"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, corpus_path, suite_path, out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    double epsilon = 0.0;
    bool epsilon_set = false;
    std::size_t eval_seq_len = 0;

    CLI::App* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "experiment config file")->required();
    train->add_option("--out", out_dir, "override output directory");
    train->add_option("--seed", seed, "override train.seed")->each([&](const std::string&) {
        seed_set = true;
    });

    CLI::App* diagnose = app.add_subcommand("diagnose", "run diagnostics over a checkpoint");
    diagnose->add_option("--checkpoint", checkpoint_path, "checkpoint container")->required();
    diagnose->add_option("--corpus", corpus_path, "evaluation corpus")->required();
    diagnose->add_option("--config", config_path, "config file for the diagnostics section");
    diagnose->add_option("--out", out_dir, "output directory")->required();
    diagnose->add_option("--seed", seed, "eval sampling seed")->each([&](const std::string&) {
        seed_set = true;
    });
    diagnose->add_option("--epsilon", epsilon, "sink threshold override")
        ->each([&](const std::string&) { epsilon_set = true; });
    diagnose->add_option("--eval-seq-len", eval_seq_len, "evaluation sequence length override");

    CLI::App* ablate = app.add_subcommand("ablate", "run an ablation suite against a baseline");
    ablate->add_option("--config", config_path, "baseline experiment config")->required();
    ablate->add_option("--suite", suite_path, "suite file of variant overrides")->required();
    ablate->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            sinklab::ExperimentConfig cfg = sinklab::load_experiment_config(config_path);
            if (!out_dir.empty()) cfg.output_dir = out_dir;
            if (seed_set) cfg.train.seed = seed;
            sinklab::RunReport report = sinklab::run_train(cfg);
            std::cout << report.to_text();
            return 0;
        }
        if (diagnose->parsed()) {
            sinklab::DiagnosticsConfig diag;
            if (!config_path.empty()) {
                sinklab::ConfigDoc doc = sinklab::ConfigDoc::parse_file(config_path);
                diag = sinklab::read_diagnostics_config(doc);
                // A full experiment config is accepted; other sections are
                // simply not consumed here.
            }
            if (epsilon_set) diag.epsilon = epsilon;
            if (eval_seq_len > 0) diag.eval_seq_len = eval_seq_len;
            diag.validate();
            sinklab::RunReport report = sinklab::run_diagnose(
                checkpoint_path, corpus_path, diag, out_dir, seed_set ? seed : 3);
            std::cout << report.to_text();
            return 0;
        }
        if (ablate->parsed()) {
            const std::vector<sinklab::AblationVariant> variants =
                sinklab::parse_suite(suite_path);
            sinklab::Table table =
                sinklab::run_ablation_suite(config_path, variants, out_dir);
            std::cout << sinklab::render_table(table);
            return 0;
        }
    } catch (const sinklab::Error& e) {
        std::cerr << e.what() << "\n";
        return exit_code_for(e.category());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
