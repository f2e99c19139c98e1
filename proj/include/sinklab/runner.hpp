#pragma once

#include <string>
#include <vector>

#include "sinklab/config.hpp"
#include "sinklab/report.hpp"

namespace sinklab {

struct RunReport {
    bool has_perplexity = false;
    double perplexity = 0.0;
    bool has_sink_ratio = false;
    double sink_ratio = 0.0;
    bool has_spike = false;
    double spike = 0.0;  // max intermediate post-residual magnitude over the eval batch
    bool aborted = false;
    std::size_t abort_step = 0;
    std::vector<std::pair<std::string, std::string>> artifacts;  // name -> path

    std::string to_text() const;
};

// Trains per the experiment config, writes checkpoints + metrics log +
// report, and measures the headline sink/spike metrics on held-out chunks.
RunReport run_train(const ExperimentConfig& cfg);

// Runs the full diagnostic suite over eval chunks sampled from the corpus and
// emits the CSV artifacts alongside the report.
RunReport run_diagnose(const std::string& checkpoint_path, const std::string& corpus_path,
                       const DiagnosticsConfig& diag, const std::string& out_dir,
                       std::uint64_t eval_seed);

struct AblationVariant {
    std::string name;
    std::vector<std::pair<std::string, std::string>> overrides;  // dotted key -> value
};

// Suite file format: one section per variant, holding config overrides:
//   variant sandwich { model.norm_kind = sandwich }
std::vector<AblationVariant> parse_suite(const std::string& path);

// Trains and measures the baseline plus each variant; emits one row per
// setup with the Setup/Perplexity/SinkRatio/Spike schema. A failing variant
// is recorded in its row and the suite continues.
Table run_ablation_suite(const std::string& baseline_config_path,
                         const std::vector<AblationVariant>& variants, const std::string& out_dir);

}  // namespace sinklab
