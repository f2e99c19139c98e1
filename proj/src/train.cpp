#include "sinklab/train.hpp"

#include <cmath>
#include <filesystem>
#include <limits>

#include "sinklab/checkpoint.hpp"

namespace sinklab {

void TrainConfig::validate() const {
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (min_lr_ratio < 0.0 || min_lr_ratio > 1.0)
        throw ConfigError("min_lr_ratio must lie in [0, 1]");
    if (total_steps == 0) throw ConfigError("total_steps must be positive");
    if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("betas must lie in [0, 1)");
    if (eps <= 0.0) throw ConfigError("eps must be positive");
    if (grad_clip <= 0.0) throw ConfigError("grad_clip must be positive");
    if (seq_len < 2) throw ConfigError("seq_len must be at least 2");
    if (batch_tokens < seq_len) throw ConfigError("batch_tokens must cover one sequence");
    if (loss_pos_min < 1 || loss_pos_min > loss_pos_max || loss_pos_max > seq_len)
        throw ConfigError("loss position range must satisfy 1 <= min <= max <= seq_len");
}

OptimizerState init_optimizer_state(const Parameters& params) {
    OptimizerState state;
    for (const auto& [name, tensor] : params.named()) {
        state.m.emplace_back(tensor.numel(), 0.0);
        state.v.emplace_back(tensor.numel(), 0.0);
    }
    return state;
}

Tensor masked_nll_loss(const Tensor& logits, const TokenSeq& targets, std::size_t pos_min,
                       std::size_t pos_max) {
    return masked_nll(logits, targets.ids, pos_min, pos_max);
}

double lr_at_step(std::size_t step, const TrainConfig& cfg) {
    if (step > cfg.total_steps)
        throw ContractError("lr_at_step: step " + std::to_string(step) + " past total_steps");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (step >= cfg.total_steps) return cfg.base_lr * cfg.min_lr_ratio;
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    return cfg.base_lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

double clip_global_norm(const Parameters& params, double cap) {
    if (cap <= 0.0) throw ContractError("clip_global_norm: cap must be positive");
    double sumsq = 0.0;
    const auto named = params.named();
    for (const auto& [name, tensor] : named) {
        if (!tensor.has_grad()) continue;
        for (double g : tensor.grad()) sumsq += g * g;
    }
    const double norm = std::sqrt(sumsq);
    if (norm <= cap) return 1.0;
    const double scale = cap / norm;
    for (auto& [name, tensor] : named) {
        if (!tensor.has_grad()) continue;
        auto& g = tensor.node()->grad;
        for (double& v : g) v *= scale;
    }
    return scale;
}

void adamw_step(Parameters& params, OptimizerState& state, double lr, const TrainConfig& cfg) {
    const auto named = params.named();
    if (named.size() != state.m.size())
        throw ContractError("optimizer state does not match parameter set");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < named.size(); ++p) {
        Tensor tensor = named[p].second;
        auto& values = tensor.mutable_values();
        auto& m = state.m[p];
        auto& v = state.v[p];
        if (m.size() != values.size())
            throw ContractError("optimizer moments for '" + named[p].first + "' have wrong size");
        const bool has_grad = tensor.has_grad();
        const double* g = has_grad ? tensor.grad().data() : nullptr;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double gi = has_grad ? g[i] : 0.0;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            values[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) +
                               cfg.weight_decay * values[i]);
        }
    }
}

double evaluate_nll(const Parameters& params, const ModelConfig& model_cfg,
                    const std::vector<Chunk>& chunks, std::size_t pos_min, std::size_t pos_max) {
    if (chunks.empty()) throw DataError("evaluate_nll: no chunks");
    double total = 0.0;
    for (const Chunk& chunk : chunks) {
        ModelOutput out = model_forward(chunk.inputs.ids, params, model_cfg, false);
        total += masked_nll_loss(out.logits, chunk.targets, pos_min, pos_max).item();
    }
    return total / static_cast<double>(chunks.size());
}

TrainResult train_run(const ModelConfig& model_cfg, const TrainConfig& cfg,
                      const std::vector<Chunk>& train_chunks, const std::vector<Chunk>& eval_chunks,
                      const std::string& checkpoint_dir,
                      const std::function<void(const StepRecord&)>& on_step) {
    model_cfg.validate();
    cfg.validate();
    if (cfg.seq_len > model_cfg.max_seq)
        throw ConfigError("seq_len exceeds the model's max_seq");
    if (train_chunks.empty()) throw DataError("train_run: no training chunks");

    TrainResult result;
    result.params = init_parameters(model_cfg, cfg.seed);
    OptimizerState state = init_optimizer_state(result.params);
    BatchSampler sampler(train_chunks.size(), cfg.seed + 1);
    const std::size_t chunks_per_step = cfg.chunks_per_step();
    const double chunk_weight = 1.0 / static_cast<double>(chunks_per_step);

    auto write_checkpoint = [&](std::size_t step) {
        if (checkpoint_dir.empty()) return;
        char name[32];
        std::snprintf(name, sizeof(name), "checkpoint-%05zu.bin", step);
        const std::string path = (std::filesystem::path(checkpoint_dir) / name).string();
        save_checkpoint(path, result.params, model_cfg);
        result.last_checkpoint = path;
    };
    write_checkpoint(0);

    const auto named = result.params.named();
    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
        for (const auto& [name, tensor] : named) tensor.zero_grad();

        const std::vector<std::size_t> batch = sampler.next(chunks_per_step);
        double loss_sum = 0.0;
        try {
            for (std::size_t idx : batch) {
                const Chunk& chunk = train_chunks[idx];
                ModelOutput out =
                    model_forward(chunk.inputs.ids, result.params, model_cfg, false);
                Tensor loss = masked_nll_loss(out.logits, chunk.targets, cfg.loss_pos_min,
                                              cfg.loss_pos_max);
                loss_sum += loss.item();
                backward(scale(loss, chunk_weight));
            }
        } catch (const NumericError&) {
            // Exploded activations surface as numeric errors mid-forward;
            // treat them like a non-finite loss.
            loss_sum = std::numeric_limits<double>::quiet_NaN();
        }
        const double loss_mean = loss_sum * chunk_weight;
        if (!std::isfinite(loss_mean)) {
            result.aborted = true;
            result.abort_step = step;
            break;
        }

        clip_global_norm(result.params, cfg.grad_clip);
        const double lr = lr_at_step(step, cfg);
        adamw_step(result.params, state, lr, cfg);

        const StepRecord record{step, lr, loss_mean};
        result.log.push_back(record);
        if (on_step) on_step(record);
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) write_checkpoint(step);
    }

    if (!result.aborted) {
        if (!checkpoint_dir.empty()) {
            const std::string path =
                (std::filesystem::path(checkpoint_dir) / "checkpoint-final.bin").string();
            save_checkpoint(path, result.params, model_cfg);
            result.last_checkpoint = path;
        }
        if (!eval_chunks.empty()) {
            result.eval_loss = evaluate_nll(result.params, model_cfg, eval_chunks,
                                            cfg.loss_pos_min, cfg.loss_pos_max);
            result.perplexity = std::exp(result.eval_loss);
            result.evaluated = true;
        }
    }
    return result;
}

}  // namespace sinklab
