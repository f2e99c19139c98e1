#include "sinklab/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace sinklab {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

ConfigDoc ConfigDoc::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_string(text, path);
}

ConfigDoc ConfigDoc::parse_string(const std::string& text, const std::string& origin) {
    ConfigDoc doc;
    doc.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> stack;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string at = origin + ":" + std::to_string(line_no);

        if (line == "}") {
            if (stack.empty()) throw ConfigError(at + ": unmatched '}'");
            stack.pop_back();
            continue;
        }
        if (line.back() == '{') {
            const std::string name = trim(line.substr(0, line.size() - 1));
            if (name.empty()) throw ConfigError(at + ": section needs a name");
            stack.push_back(name);
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(at + ": expected 'key = value', section header, or '}'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(at + ": empty key");
        std::string path;
        for (const std::string& s : stack) path += s + ".";
        path += key;
        if (doc.entries_.count(path))
            throw ConfigError(at + ": duplicate key '" + path + "'");
        doc.entries_[path] = Entry{value, line_no, false};
        doc.order_.push_back(path);
    }
    if (!stack.empty())
        throw ConfigError(origin + ": unterminated section '" + stack.back() + "'");
    return doc;
}

bool ConfigDoc::has(const std::string& key) const { return entries_.count(key) > 0; }

const ConfigDoc::Entry& ConfigDoc::lookup(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end())
        throw ConfigError(origin_ + ": missing required key '" + key + "'");
    it->second.consumed = true;
    return it->second;
}

std::string ConfigDoc::get_string(const std::string& key) { return lookup(key).value; }

double ConfigDoc::get_double(const std::string& key) {
    return parse_double(lookup(key).value, origin_ + ": key '" + key + "'");
}

std::size_t ConfigDoc::get_count(const std::string& key) {
    const std::string v = lookup(key).value;
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError(origin_ + ": key '" + key + "' is not a count: '" + v + "'");
    return out;
}

std::uint64_t ConfigDoc::get_u64(const std::string& key) {
    const std::string v = lookup(key).value;
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError(origin_ + ": key '" + key + "' is not an integer: '" + v + "'");
    return out;
}

std::string ConfigDoc::get_string_or(const std::string& key, const std::string& fallback) {
    return has(key) ? get_string(key) : fallback;
}
double ConfigDoc::get_double_or(const std::string& key, double fallback) {
    return has(key) ? get_double(key) : fallback;
}
std::size_t ConfigDoc::get_count_or(const std::string& key, std::size_t fallback) {
    return has(key) ? get_count(key) : fallback;
}
std::uint64_t ConfigDoc::get_u64_or(const std::string& key, std::uint64_t fallback) {
    return has(key) ? get_u64(key) : fallback;
}

void ConfigDoc::set(const std::string& key, const std::string& value) {
    auto it = entries_.find(key);
    if (it == entries_.end()) {
        entries_[key] = Entry{value, 0, false};
        order_.push_back(key);
    } else {
        it->second.value = value;
        it->second.consumed = false;
    }
}

std::vector<std::string> ConfigDoc::keys() const { return order_; }

void ConfigDoc::finish() const {
    std::string unknown;
    for (const std::string& key : order_) {
        const Entry& e = entries_.at(key);
        if (!e.consumed) {
            if (!unknown.empty()) unknown += ", ";
            unknown += "'" + key + "'";
        }
    }
    if (!unknown.empty())
        throw ConfigError(origin_ + ": unknown key(s) " + unknown);
}

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw ContractError("format_double failed");
    return std::string(buf, p);
}

double parse_double(const std::string& s, const std::string& what) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size())
        throw ConfigError(what + " is not a number: '" + s + "'");
    return out;
}

void DiagnosticsConfig::validate() const {
    if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("epsilon must lie in [0, 1]");
    if (eval_seq_len < 2) throw ConfigError("eval_seq_len must be at least 2");
    if (jump <= 1.0) throw ConfigError("jump must exceed 1");
    if (abs_floor < 0.0) throw ConfigError("abs_floor must be nonnegative");
    if (rel_factor <= 0.0) throw ConfigError("rel_factor must be positive");
    if (top_k == 0) throw ConfigError("top_k must be positive");
    if (eval_chunks == 0) throw ConfigError("eval_chunks must be positive");
}

ModelConfig read_model_config(ConfigDoc& doc, const std::string& prefix) {
    ModelConfig cfg;
    cfg.n_layers = doc.get_count_or(prefix + "n_layers", cfg.n_layers);
    cfg.d_model = doc.get_count_or(prefix + "d_model", cfg.d_model);
    cfg.n_heads = doc.get_count_or(prefix + "n_heads", cfg.n_heads);
    cfg.d_head = doc.get_count_or(prefix + "d_head", cfg.d_head);
    cfg.d_ffn = doc.get_count_or(prefix + "d_ffn", cfg.d_ffn);
    cfg.vocab_size = doc.get_count_or(prefix + "vocab_size", cfg.vocab_size);
    cfg.max_seq = doc.get_count_or(prefix + "max_seq", cfg.max_seq);
    cfg.norm_kind = norm_kind_from_string(
        doc.get_string_or(prefix + "norm_kind", to_string(cfg.norm_kind)));
    cfg.ffn_kind =
        ffn_kind_from_string(doc.get_string_or(prefix + "ffn_kind", to_string(cfg.ffn_kind)));
    cfg.gate_kind =
        gate_kind_from_string(doc.get_string_or(prefix + "gate_kind", to_string(cfg.gate_kind)));
    cfg.rope_base = doc.get_double_or(prefix + "rope_base", cfg.rope_base);
    cfg.validate();
    return cfg;
}

TrainConfig read_train_config(ConfigDoc& doc, const std::string& prefix) {
    TrainConfig cfg;
    cfg.base_lr = doc.get_double_or(prefix + "base_lr", cfg.base_lr);
    cfg.min_lr_ratio = doc.get_double_or(prefix + "min_lr_ratio", cfg.min_lr_ratio);
    cfg.warmup_steps = doc.get_count_or(prefix + "warmup_steps", cfg.warmup_steps);
    cfg.total_steps = doc.get_count_or(prefix + "total_steps", cfg.total_steps);
    cfg.weight_decay = doc.get_double_or(prefix + "weight_decay", cfg.weight_decay);
    cfg.beta1 = doc.get_double_or(prefix + "beta1", cfg.beta1);
    cfg.beta2 = doc.get_double_or(prefix + "beta2", cfg.beta2);
    cfg.eps = doc.get_double_or(prefix + "eps", cfg.eps);
    cfg.grad_clip = doc.get_double_or(prefix + "grad_clip", cfg.grad_clip);
    cfg.batch_tokens = doc.get_count_or(prefix + "batch_tokens", cfg.batch_tokens);
    cfg.seq_len = doc.get_count_or(prefix + "seq_len", cfg.seq_len);
    cfg.loss_pos_min = doc.get_count_or(prefix + "loss_pos_min", cfg.loss_pos_min);
    // The loss covers the full sequence unless a range is configured.
    cfg.loss_pos_max = doc.get_count_or(prefix + "loss_pos_max", cfg.seq_len);
    cfg.seed = doc.get_u64_or(prefix + "seed", cfg.seed);
    cfg.checkpoint_every = doc.get_count_or(prefix + "checkpoint_every", cfg.checkpoint_every);
    cfg.validate();
    return cfg;
}

DiagnosticsConfig read_diagnostics_config(ConfigDoc& doc, const std::string& prefix) {
    DiagnosticsConfig cfg;
    cfg.epsilon = doc.get_double_or(prefix + "epsilon", cfg.epsilon);
    cfg.eval_seq_len = doc.get_count_or(prefix + "eval_seq_len", cfg.eval_seq_len);
    cfg.jump = doc.get_double_or(prefix + "jump", cfg.jump);
    cfg.abs_floor = doc.get_double_or(prefix + "abs_floor", cfg.abs_floor);
    cfg.rel_factor = doc.get_double_or(prefix + "rel_factor", cfg.rel_factor);
    cfg.top_k = doc.get_count_or(prefix + "top_k", cfg.top_k);
    cfg.eval_chunks = doc.get_count_or(prefix + "eval_chunks", cfg.eval_chunks);
    cfg.validate();
    return cfg;
}

ExperimentConfig read_experiment_config(ConfigDoc& doc) {
    ExperimentConfig cfg;
    cfg.model = read_model_config(doc);
    cfg.train = read_train_config(doc);
    cfg.diagnostics = read_diagnostics_config(doc);
    cfg.corpus_path = doc.get_string("data.corpus");
    cfg.output_dir = doc.get_string_or("output_dir", "out");
    if (cfg.train.seq_len > cfg.model.max_seq)
        throw ConfigError("train.seq_len exceeds model.max_seq");
    if (cfg.diagnostics.eval_seq_len > cfg.model.max_seq)
        throw ConfigError("diagnostics.eval_seq_len exceeds model.max_seq");
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    ConfigDoc doc = ConfigDoc::parse_file(path);
    ExperimentConfig cfg = read_experiment_config(doc);
    doc.finish();
    return cfg;
}

void write_model_config(std::ostream& out, const ModelConfig& cfg) {
    out << "model {\n";
    out << "  n_layers = " << cfg.n_layers << "\n";
    out << "  d_model = " << cfg.d_model << "\n";
    out << "  n_heads = " << cfg.n_heads << "\n";
    out << "  d_head = " << cfg.d_head << "\n";
    out << "  d_ffn = " << cfg.d_ffn << "\n";
    out << "  vocab_size = " << cfg.vocab_size << "\n";
    out << "  max_seq = " << cfg.max_seq << "\n";
    out << "  norm_kind = " << to_string(cfg.norm_kind) << "\n";
    out << "  ffn_kind = " << to_string(cfg.ffn_kind) << "\n";
    out << "  gate_kind = " << to_string(cfg.gate_kind) << "\n";
    out << "  rope_base = " << format_double(cfg.rope_base) << "\n";
    out << "}\n";
}

void write_experiment_config(std::ostream& out, const ExperimentConfig& cfg) {
    write_model_config(out, cfg.model);
    out << "train {\n";
    out << "  base_lr = " << format_double(cfg.train.base_lr) << "\n";
    out << "  min_lr_ratio = " << format_double(cfg.train.min_lr_ratio) << "\n";
    out << "  warmup_steps = " << cfg.train.warmup_steps << "\n";
    out << "  total_steps = " << cfg.train.total_steps << "\n";
    out << "  weight_decay = " << format_double(cfg.train.weight_decay) << "\n";
    out << "  beta1 = " << format_double(cfg.train.beta1) << "\n";
    out << "  beta2 = " << format_double(cfg.train.beta2) << "\n";
    out << "  eps = " << format_double(cfg.train.eps) << "\n";
    out << "  grad_clip = " << format_double(cfg.train.grad_clip) << "\n";
    out << "  batch_tokens = " << cfg.train.batch_tokens << "\n";
    out << "  seq_len = " << cfg.train.seq_len << "\n";
    out << "  loss_pos_min = " << cfg.train.loss_pos_min << "\n";
    out << "  loss_pos_max = " << cfg.train.loss_pos_max << "\n";
    out << "  seed = " << cfg.train.seed << "\n";
    out << "  checkpoint_every = " << cfg.train.checkpoint_every << "\n";
    out << "}\n";
    out << "diagnostics {\n";
    out << "  epsilon = " << format_double(cfg.diagnostics.epsilon) << "\n";
    out << "  eval_seq_len = " << cfg.diagnostics.eval_seq_len << "\n";
    out << "  jump = " << format_double(cfg.diagnostics.jump) << "\n";
    out << "  abs_floor = " << format_double(cfg.diagnostics.abs_floor) << "\n";
    out << "  rel_factor = " << format_double(cfg.diagnostics.rel_factor) << "\n";
    out << "  top_k = " << cfg.diagnostics.top_k << "\n";
    out << "  eval_chunks = " << cfg.diagnostics.eval_chunks << "\n";
    out << "}\n";
    out << "data {\n";
    out << "  corpus = " << cfg.corpus_path << "\n";
    out << "}\n";
    out << "output_dir = " << cfg.output_dir << "\n";
}

}  // namespace sinklab
