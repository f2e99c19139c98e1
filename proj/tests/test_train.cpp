#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "sinklab/checkpoint.hpp"
#include "sinklab/train.hpp"

using namespace sinklab;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("sinklab-train-" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_head = 8;
    cfg.d_ffn = 24;
    cfg.vocab_size = 256;
    cfg.max_seq = 16;
    return cfg;
}

TrainConfig tiny_train() {
    TrainConfig cfg;
    cfg.base_lr = 3e-3;
    cfg.warmup_steps = 5;
    cfg.total_steps = 50;
    cfg.batch_tokens = 64;
    cfg.seq_len = 16;
    cfg.loss_pos_min = 1;
    cfg.loss_pos_max = 16;
    cfg.checkpoint_every = 20;
    cfg.seed = 11;
    return cfg;
}

std::vector<Chunk> repetitive_chunks(std::size_t seq_len, std::size_t total_tokens) {
    std::string text;
    while (text.size() < total_tokens) text += "the rain follows the river. ";
    text.resize(total_tokens);
    return chunk_corpus(corpus_from_text(text), seq_len);
}

}  // namespace

TEST_CASE("lr schedule: warmup, cosine midpoint, floor, continuity") {
    TrainConfig cfg;
    cfg.base_lr = 1.0;
    cfg.min_lr_ratio = 0.1;
    cfg.warmup_steps = 100;
    cfg.total_steps = 1100;
    CHECK(lr_at_step(0, cfg) == 0.0);
    CHECK(lr_at_step(50, cfg) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(lr_at_step(1100, cfg) == doctest::Approx(0.1).epsilon(1e-15));
    // midpoint of the decay phase: base*(0.1 + 0.9*(1+cos(pi/2))/2)
    CHECK(lr_at_step(600, cfg) == doctest::Approx(0.55).epsilon(1e-12));
    // continuity at the warmup boundary
    CHECK(lr_at_step(100, cfg) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(lr_at_step(99, cfg) == doctest::Approx(0.99).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at_step(1101, cfg), ContractError);
}

TEST_CASE("clip_global_norm scales exactly at the cap") {
    ModelConfig mc = tiny_model();
    Parameters params = init_parameters(mc, 1);
    const auto named = params.named();
    for (const auto& [name, tensor] : named) tensor.zero_grad();

    // All grads zero except two coordinates forming norm 5.
    named[0].second.node()->grad[0] = 3.0;
    named[0].second.node()->grad[1] = 4.0;
    CHECK(clip_global_norm(params, 1.0) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(named[0].second.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(named[0].second.grad()[1] == doctest::Approx(0.8).epsilon(1e-15));

    // Under the cap: a no-op returning 1.
    for (const auto& [name, tensor] : named) tensor.zero_grad();
    named[0].second.node()->grad[0] = 0.5;
    CHECK(clip_global_norm(params, 1.0) == 1.0);
    CHECK(named[0].second.grad()[0] == 0.5);
}

TEST_CASE("post-clip global norm never exceeds the cap") {
    ModelConfig mc = tiny_model();
    Parameters params = init_parameters(mc, 2);
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        double cap = 0.25 + rng.uniform() * 2.0;
        for (auto& [name, tensor] : params.named()) {
            tensor.zero_grad();
            for (double& g : tensor.node()->grad) g = rng.normal(trial + 0.5);
        }
        clip_global_norm(params, cap);
        double sumsq = 0.0;
        for (const auto& [name, tensor] : params.named())
            for (double g : tensor.grad()) sumsq += g * g;
        CHECK(std::sqrt(sumsq) <= cap + 1e-12);
    }
}

TEST_CASE("adamw first-step worked example") {
    ModelConfig mc = tiny_model();
    Parameters params = init_parameters(mc, 4);
    for (auto& [name, tensor] : params.named()) {
        for (double& v : tensor.mutable_values()) v = 1.0;
        tensor.zero_grad();
        for (double& g : tensor.node()->grad) g = 1.0;
    }
    TrainConfig cfg = tiny_train();
    cfg.weight_decay = 0.1;
    cfg.eps = 1e-300;  // eps -> 0
    OptimizerState state = init_optimizer_state(params);
    adamw_step(params, state, 0.1, cfg);
    for (const auto& [name, tensor] : params.named())
        for (double v : tensor.values()) CHECK(v == doctest::Approx(0.89).epsilon(1e-12));
}

TEST_CASE("adamw with zero gradients and zero decay is a no-op") {
    ModelConfig mc = tiny_model();
    Parameters params = init_parameters(mc, 5);
    const std::vector<double> before = params.embedding.values();
    TrainConfig cfg = tiny_train();
    cfg.weight_decay = 0.0;
    OptimizerState state = init_optimizer_state(params);
    for (const auto& [name, tensor] : params.named()) tensor.zero_grad();
    for (int step = 0; step < 5; ++step) adamw_step(params, state, 0.1, cfg);
    CHECK(params.embedding.values() == before);
}

TEST_CASE("adamw matches an independent scalar recurrence for 10 steps") {
    ModelConfig mc = tiny_model();
    Parameters params = init_parameters(mc, 6);
    TrainConfig cfg = tiny_train();
    cfg.weight_decay = 0.0;
    OptimizerState state = init_optimizer_state(params);

    const double p0 = params.embedding.values()[0];
    const double lr = 0.01;
    // Per-step gradients fed to every coordinate.
    const std::vector<double> grads = {1.0, -0.5, 2.0, 0.0, 0.25, -1.5, 0.75, 3.0, -0.125, 0.5};

    // Independent scalar AdamW recurrence for coordinate 0.
    double p = p0, m = 0.0, v = 0.0;
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        const double g = grads[t - 1];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        const double m_hat = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
        const double v_hat = v / (1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
        p -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }

    for (double g : grads) {
        for (auto& [name, tensor] : params.named()) {
            tensor.zero_grad();
            for (double& gv : tensor.node()->grad) gv = g;
        }
        adamw_step(params, state, lr, cfg);
    }
    CHECK(params.embedding.values()[0] == doctest::Approx(p).epsilon(1e-12));
}

TEST_CASE("adamw decays zero-gradient parameters geometrically") {
    ModelConfig mc = tiny_model();
    Parameters params = init_parameters(mc, 7);
    TrainConfig cfg = tiny_train();
    cfg.weight_decay = 0.1;
    const double lr = 0.05;
    const double p0 = params.embedding.values()[3];
    OptimizerState state = init_optimizer_state(params);
    for (const auto& [name, tensor] : params.named()) tensor.zero_grad();
    for (int t = 1; t <= 8; ++t) {
        adamw_step(params, state, lr, cfg);
        CHECK(params.embedding.values()[3] ==
              doctest::Approx(p0 * std::pow(1.0 - lr * cfg.weight_decay, t)).epsilon(1e-12));
    }
}

TEST_CASE("train_run descends on a repetitive corpus and is bit-deterministic") {
    ModelConfig mc = tiny_model();
    TrainConfig tc = tiny_train();
    auto chunks = repetitive_chunks(tc.seq_len, 2048);
    CorpusSplit split = split_chunks(chunks, 4, tc.seed + 2);

    TrainResult a = train_run(mc, tc, split.train, split.eval, "");
    CHECK_FALSE(a.aborted);
    REQUIRE(a.log.size() == tc.total_steps);
    CHECK(a.log.back().loss < a.log.front().loss);
    CHECK(a.log.front().loss < 1.05 * std::log(256.0));  // starts near uniform

    TrainResult b = train_run(mc, tc, split.train, split.eval, "");
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].loss == b.log[i].loss);  // bit-identical
        CHECK(a.log[i].lr == b.log[i].lr);
    }
    CHECK(a.eval_loss == b.eval_loss);

    // perplexity = exp(mean masked NLL) definitionally
    CHECK(a.perplexity == std::exp(a.eval_loss));
    const double recomputed =
        evaluate_nll(a.params, mc, split.eval, tc.loss_pos_min, tc.loss_pos_max);
    CHECK(a.eval_loss == doctest::Approx(recomputed).epsilon(1e-12));
}

TEST_CASE("train_run masking: positions outside the range get zero gradient") {
    ModelConfig mc = tiny_model();
    Parameters params = init_parameters(mc, 8);
    auto chunks = repetitive_chunks(16, 512);
    const Chunk& chunk = chunks[0];
    ModelOutput out = model_forward(chunk.inputs.ids, params, mc, false);
    backward(masked_nll_loss(out.logits, chunk.targets, 9, 16));
    REQUIRE(out.logits.has_grad());
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t v = 0; v < mc.vocab_size; ++v)
            CHECK(out.logits.grad()[t * mc.vocab_size + v] == 0.0);
}

TEST_CASE("train_run aborts on divergence and retains the last good checkpoint") {
    TempDir dir;
    ModelConfig mc = tiny_model();
    TrainConfig tc = tiny_train();
    tc.base_lr = 1e18;  // guaranteed blow-up after warmup kicks in
    tc.warmup_steps = 0;
    tc.total_steps = 30;
    auto chunks = repetitive_chunks(tc.seq_len, 1024);
    CorpusSplit split = split_chunks(chunks, 2, 1);
    TrainResult result = train_run(mc, tc, split.train, split.eval, dir.path.string());
    CHECK(result.aborted);
    CHECK(result.abort_step >= 1);
    CHECK_FALSE(result.evaluated);
    REQUIRE_FALSE(result.last_checkpoint.empty());
    // The retained checkpoint predates the abort and loads cleanly.
    LoadedCheckpoint loaded = load_checkpoint(result.last_checkpoint);
    CHECK(loaded.cfg == mc);
    for (const auto& [name, tensor] : loaded.params.named()) CHECK(all_finite(tensor));
}

TEST_CASE("train_run writes periodic checkpoints") {
    TempDir dir;
    ModelConfig mc = tiny_model();
    TrainConfig tc = tiny_train();
    tc.total_steps = 40;
    tc.checkpoint_every = 20;
    auto chunks = repetitive_chunks(tc.seq_len, 1024);
    CorpusSplit split = split_chunks(chunks, 2, 1);
    TrainResult result = train_run(mc, tc, split.train, split.eval, dir.path.string());
    CHECK_FALSE(result.aborted);
    namespace fs = std::filesystem;
    CHECK(fs::exists(dir.path / "checkpoint-00000.bin"));
    CHECK(fs::exists(dir.path / "checkpoint-00020.bin"));
    CHECK(fs::exists(dir.path / "checkpoint-00040.bin"));
    CHECK(fs::exists(dir.path / "checkpoint-final.bin"));
    CHECK(result.last_checkpoint == (dir.path / "checkpoint-final.bin").string());
}

TEST_CASE("train config validation") {
    TrainConfig cfg = tiny_train();
    cfg.loss_pos_min = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_train();
    cfg.loss_pos_max = cfg.seq_len + 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_train();
    cfg.warmup_steps = cfg.total_steps + 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
