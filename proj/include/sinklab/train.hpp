#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sinklab/data.hpp"
#include "sinklab/model.hpp"

namespace sinklab {

struct TrainConfig {
    double base_lr = 3e-4;
    double min_lr_ratio = 0.1;
    std::size_t warmup_steps = 200;
    std::size_t total_steps = 2000;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double grad_clip = 1.0;
    std::size_t batch_tokens = 8192;
    std::size_t seq_len = 64;
    std::size_t loss_pos_min = 1;  // 1-based inclusive range of positions in the loss
    std::size_t loss_pos_max = 64;
    std::uint64_t seed = 1;
    std::size_t checkpoint_every = 500;

    void validate() const;
    std::size_t chunks_per_step() const { return batch_tokens / seq_len; }
};

// Per-parameter AdamW moments, aligned with Parameters::named() order.
struct OptimizerState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t step = 0;
};

OptimizerState init_optimizer_state(const Parameters& params);

// Mean NLL over the 1-based inclusive position range; other positions
// contribute nothing to the loss or its gradient.
Tensor masked_nll_loss(const Tensor& logits, const TokenSeq& targets, std::size_t pos_min,
                       std::size_t pos_max);

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to
// min_lr_ratio * base_lr at total_steps.
double lr_at_step(std::size_t step, const TrainConfig& cfg);

// Scales every gradient by cap/g when the global L2 norm g exceeds cap;
// returns the applied scale.
double clip_global_norm(const Parameters& params, double cap);

void adamw_step(Parameters& params, OptimizerState& state, double lr, const TrainConfig& cfg);

struct StepRecord {
    std::size_t step;
    double lr;
    double loss;
};

struct TrainResult {
    Parameters params;
    std::vector<StepRecord> log;
    bool aborted = false;       // non-finite loss; params frozen at last good state
    std::size_t abort_step = 0;
    double eval_loss = 0.0;     // mean masked NLL over eval chunks
    double perplexity = 0.0;    // exp(eval_loss)
    bool evaluated = false;
    std::string last_checkpoint;  // most recent on-disk checkpoint, "" if none
};

// Deterministic training given seeds: parameter init from cfg.seed, batch
// order from cfg.seed+1. Periodic checkpoints land in checkpoint_dir when it
// is non-empty (step 0 included, so an abort always retains a good one).
TrainResult train_run(const ModelConfig& model_cfg, const TrainConfig& cfg,
                      const std::vector<Chunk>& train_chunks, const std::vector<Chunk>& eval_chunks,
                      const std::string& checkpoint_dir,
                      const std::function<void(const StepRecord&)>& on_step = {});

// Mean masked NLL of a parameter set over a chunk list.
double evaluate_nll(const Parameters& params, const ModelConfig& model_cfg,
                    const std::vector<Chunk>& chunks, std::size_t pos_min, std::size_t pos_max);

}  // namespace sinklab
