#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "sinklab/checkpoint.hpp"
#include "sinklab/runner.hpp"

using namespace sinklab;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("sinklab-" + tag + "-" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string fixture_corpus() {
    return std::string(SINKLAB_FIXTURE_DIR) + "/corpus.txt";
}

std::string tiny_experiment_text(const std::string& out_dir) {
    return
        "model {\n"
        "  n_layers = 1\n"
        "  d_model = 16\n"
        "  n_heads = 2\n"
        "  d_head = 8\n"
        "  d_ffn = 24\n"
        "  vocab_size = 256\n"
        "  max_seq = 16\n"
        "}\n"
        "train {\n"
        "  base_lr = 3e-3\n"
        "  warmup_steps = 3\n"
        "  total_steps = 12\n"
        "  batch_tokens = 64\n"
        "  seq_len = 16\n"
        "  loss_pos_max = 16\n"
        "  checkpoint_every = 6\n"
        "  seed = 5\n"
        "}\n"
        "diagnostics {\n"
        "  eval_seq_len = 16\n"
        "  eval_chunks = 4\n"
        "}\n"
        "data {\n"
        "  corpus = " + fixture_corpus() + "\n"
        "}\n"
        "output_dir = " + out_dir + "\n";
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("run_train produces a full report deterministically") {
    TempDir dir("runner");
    ConfigDoc doc =
        ConfigDoc::parse_string(tiny_experiment_text(dir.file("a")), "inline");
    ExperimentConfig cfg = read_experiment_config(doc);
    doc.finish();

    RunReport a = run_train(cfg);
    CHECK_FALSE(a.aborted);
    CHECK(a.has_perplexity);
    CHECK(a.has_sink_ratio);
    CHECK(a.has_spike);
    CHECK(a.perplexity > 0.0);
    CHECK(fs::exists(dir.file("a") + "/metrics.log"));
    CHECK(fs::exists(dir.file("a") + "/report.txt"));
    CHECK(fs::exists(dir.file("a") + "/checkpoint-final.bin"));

    // Same config + seed elsewhere: bit-identical checkpoint and metrics.
    ExperimentConfig cfg2 = cfg;
    cfg2.output_dir = dir.file("b");
    RunReport b = run_train(cfg2);
    CHECK(a.perplexity == b.perplexity);
    CHECK(a.sink_ratio == b.sink_ratio);
    CHECK(a.spike == b.spike);
    CHECK(slurp(dir.file("a") + "/metrics.log") == slurp(dir.file("b") + "/metrics.log"));
    CHECK(slurp(dir.file("a") + "/checkpoint-final.bin") ==
          slurp(dir.file("b") + "/checkpoint-final.bin"));
    CHECK(slurp(dir.file("a") + "/report.txt") == slurp(dir.file("b") + "/report.txt"));
}

TEST_CASE("run_diagnose: zero-weight checkpoint has uniform-causal sinks") {
    TempDir dir("diag");
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 24;
    cfg.n_heads = 4;
    cfg.d_head = 6;
    cfg.d_ffn = 32;
    cfg.vocab_size = 256;
    cfg.max_seq = 64;
    Parameters params = init_parameters(cfg, 1);
    for (auto& [name, tensor] : params.named())
        if (name != "embedding")
            for (double& v : tensor.mutable_values()) v = 0.0;
    const std::string ckpt = dir.file("zero.bin");
    save_checkpoint(ckpt, params, cfg);

    DiagnosticsConfig diag;
    diag.epsilon = 0.3;
    diag.eval_seq_len = 64;
    diag.eval_chunks = 3;

    RunReport r = run_diagnose(ckpt, fixture_corpus(), diag, dir.file("out"), 3);
    // Zero Q/K makes every attention row uniform-causal: alpha_1 = H_64/64 < 0.3.
    CHECK(r.sink_ratio == 0.0);
    CHECK(r.has_perplexity);

    // Epsilon monotonicity on the same checkpoint.
    DiagnosticsConfig low = diag;
    low.epsilon = 0.05;
    RunReport r_low = run_diagnose(ckpt, fixture_corpus(), low, dir.file("out_low"), 3);
    CHECK(r_low.sink_ratio >= r.sink_ratio);

    // Idempotence: rerun emits byte-identical artifacts.
    RunReport again = run_diagnose(ckpt, fixture_corpus(), diag, dir.file("out2"), 3);
    (void)again;
    for (const std::string name :
         {"magnitude_trace.csv", "step_blocks.csv", "spike_cells.csv", "sink_alpha.csv",
          "frobenius.csv", "eigen_spectrum.csv", "report.txt"})
        CHECK(slurp(dir.file("out") + "/" + name) == slurp(dir.file("out2") + "/" + name));
}

TEST_CASE("ablation suite: schema, baseline row, failure isolation") {
    TempDir dir("ablate");
    const std::string config_path = dir.file("baseline.cfg");
    {
        std::ofstream out(config_path);
        out << tiny_experiment_text(dir.file("ignored"));
    }
    const std::string suite_path = dir.file("suite.cfg");
    {
        std::ofstream out(suite_path);
        out << "variant sandwich {\n  model.norm_kind = sandwich\n}\n";
        out << "variant dyt {\n  model.norm_kind = dynamic_tanh\n}\n";
        out << "variant broken {\n  model.norm_kid = sandwich\n}\n";  // typo: must fail loudly
    }
    const auto variants = parse_suite(suite_path);
    REQUIRE(variants.size() == 3);
    CHECK(variants[0].name == "sandwich");
    CHECK(variants[1].overrides ==
          std::vector<std::pair<std::string, std::string>>{{"model.norm_kind", "dynamic_tanh"}});

    Table table = run_ablation_suite(config_path, variants, dir.file("out"));
    CHECK(table.columns ==
          std::vector<std::string>{"setup", "perplexity", "sink_ratio", "spike", "status"});
    REQUIRE(table.rows.size() == 4);
    CHECK(std::get<std::string>(table.rows[0][0]) == "baseline");
    CHECK(std::get<std::string>(table.rows[0][4]) == "ok");
    CHECK(std::get<std::string>(table.rows[1][4]) == "ok");
    CHECK(std::get<std::string>(table.rows[2][4]) == "ok");
    // The typo'd variant is recorded in-row and does not sink the suite.
    CHECK(std::get<std::string>(table.rows[3][4]).find("model.norm_kid") != std::string::npos);
    CHECK(fs::exists(dir.file("out") + "/ablation.csv"));
    CHECK(fs::exists(dir.file("out") + "/ablation.txt"));
    // Emitted CSV re-parses to the same table.
    Table back = parse_csv(slurp(dir.file("out") + "/ablation.csv"));
    REQUIRE(back.rows.size() == table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r)
        CHECK(back.rows[r] == table.rows[r]);
}

TEST_CASE("ablation suite: context-length variants propagate the loss mask") {
    TempDir dir("ctx");
    const std::string config_path = dir.file("baseline.cfg");
    {
        std::ofstream out(config_path);
        out << tiny_experiment_text(dir.file("ignored"));
    }
    std::vector<AblationVariant> variants = {
        {"late_loss", {{"train.loss_pos_min", "9"}}},
    };
    Table table = run_ablation_suite(config_path, variants, dir.file("out"));
    REQUIRE(table.rows.size() == 2);
    CHECK(std::get<std::string>(table.rows[1][4]) == "ok");
    // Different masks train differently on the same seed.
    CHECK(std::get<double>(table.rows[0][1]) != std::get<double>(table.rows[1][1]));
}

TEST_CASE("empty suite yields a baseline-only table") {
    TempDir dir("empty");
    const std::string config_path = dir.file("baseline.cfg");
    {
        std::ofstream out(config_path);
        out << tiny_experiment_text(dir.file("ignored"));
    }
    Table table = run_ablation_suite(config_path, {}, dir.file("out"));
    REQUIRE(table.rows.size() == 1);
    CHECK(std::get<std::string>(table.rows[0][0]) == "baseline");
}
