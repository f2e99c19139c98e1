#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "sinklab/model.hpp"
#include "sinklab/train.hpp"

namespace sinklab {

// Structured key-value text with nested sections:
//
//   model {
//     n_layers = 4
//   }
//   output_dir = out
//
// Keys are addressed by dotted path ("model.n_layers"). Consumers mark keys
// as read; finish() rejects anything left over, so a typo in a config or an
// ablation override is a hard error instead of a silent no-op.
class ConfigDoc {
public:
    static ConfigDoc parse_file(const std::string& path);
    static ConfigDoc parse_string(const std::string& text, const std::string& origin);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key);
    double get_double(const std::string& key);
    std::size_t get_count(const std::string& key);
    std::uint64_t get_u64(const std::string& key);

    std::string get_string_or(const std::string& key, const std::string& fallback);
    double get_double_or(const std::string& key, double fallback);
    std::size_t get_count_or(const std::string& key, std::size_t fallback);
    std::uint64_t get_u64_or(const std::string& key, std::uint64_t fallback);

    // Overwrites or inserts a value (ablation overrides).
    void set(const std::string& key, const std::string& value);

    // Keys in document order.
    std::vector<std::string> keys() const;

    // Throws ConfigError naming every unconsumed key.
    void finish() const;

private:
    struct Entry {
        std::string value;
        std::size_t line = 0;
        bool consumed = false;
    };
    const Entry& lookup(const std::string& key);

    std::string origin_;
    std::vector<std::string> order_;
    std::map<std::string, Entry> entries_;
};

std::string format_double(double v);  // shortest round-trip representation
double parse_double(const std::string& s, const std::string& what);

struct DiagnosticsConfig {
    double epsilon = 0.3;
    std::size_t eval_seq_len = 64;
    double jump = 10.0;
    double abs_floor = 50.0;
    double rel_factor = 100.0;
    std::size_t top_k = 3;
    std::size_t eval_chunks = 64;

    void validate() const;
};

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    DiagnosticsConfig diagnostics;
    std::string corpus_path;
    std::string output_dir;
};

ModelConfig read_model_config(ConfigDoc& doc, const std::string& prefix = "model.");
TrainConfig read_train_config(ConfigDoc& doc, const std::string& prefix = "train.");
DiagnosticsConfig read_diagnostics_config(ConfigDoc& doc,
                                          const std::string& prefix = "diagnostics.");
ExperimentConfig read_experiment_config(ConfigDoc& doc);
ExperimentConfig load_experiment_config(const std::string& path);

void write_model_config(std::ostream& out, const ModelConfig& cfg);
void write_experiment_config(std::ostream& out, const ExperimentConfig& cfg);

}  // namespace sinklab
