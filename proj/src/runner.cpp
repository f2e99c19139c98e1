#include "sinklab/runner.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "sinklab/checkpoint.hpp"
#include "sinklab/data.hpp"
#include "sinklab/diagnostics.hpp"
#include "sinklab/train.hpp"

namespace sinklab {

namespace {

namespace fs = std::filesystem;

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string metrics_text(const std::vector<StepRecord>& log) {
    std::string out;
    for (const StepRecord& r : log) {
        out += "step=" + std::to_string(r.step);
        out += " lr=" + format_double(r.lr);
        out += " loss=" + format_double(r.loss);
        out += "\n";
    }
    return out;
}

// Rebuilds eval chunks at a different sequence length from held-out tokens.
std::vector<Chunk> rechunk(const std::vector<Chunk>& chunks, std::size_t seq_len) {
    if (chunks.empty() || chunks.front().inputs.size() == seq_len) return chunks;
    Corpus corpus;
    for (const Chunk& c : chunks) {
        corpus.stream.ids.insert(corpus.stream.ids.end(), c.inputs.ids.begin(),
                                 c.inputs.ids.end());
        corpus.stream.ids.push_back(c.targets.ids.back());
    }
    return chunk_corpus(corpus, seq_len);
}

struct EvalAggregate {
    double sink_ratio = 0.0;
    double spike = 0.0;
    double nll = 0.0;
    MagnitudeTrace merged_trace;
    SpikeReport merged_spikes;
    StepBlockReport steps;
    // mean alpha per (block, head) over sequences
    std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> alpha_mean;
};

EvalAggregate evaluate_model(const Parameters& params, const ModelConfig& cfg,
                             const std::vector<Chunk>& chunks, const DiagnosticsConfig& diag) {
    if (chunks.empty()) throw DataError("evaluate_model: no eval chunks");
    EvalAggregate agg;
    std::vector<MagnitudeTrace> traces;
    double ratio_sum = 0.0, nll_sum = 0.0;
    double best_spike = -1.0;
    for (const Chunk& chunk : chunks) {
        ModelOutput out = model_forward(chunk.inputs.ids, params, cfg, true);
        nll_sum += masked_nll_loss(out.logits, chunk.targets, 1, chunk.targets.size()).item();

        SinkReport sinks = sink_report(*out.trace, diag.epsilon);
        ratio_sum += sinks.ratio;
        for (const HeadSinkScore& head : sinks.heads) {
            auto& acc = agg.alpha_mean[{head.block, head.head}];
            if (acc.empty()) acc.assign(head.alpha.size(), 0.0);
            for (std::size_t k = 0; k < head.alpha.size(); ++k) acc[k] += head.alpha[k];
        }

        traces.push_back(residual_trace(*out.trace, diag.top_k));
        SpikeReport spikes = detect_spikes(*out.trace, diag.abs_floor, diag.rel_factor);
        if (spikes.max_spike > best_spike) {
            best_spike = spikes.max_spike;
            agg.merged_spikes = spikes;  // ratio matrix from the peak sequence
        }
        agg.spike = std::max(agg.spike, spikes.max_spike);
    }
    const double n = static_cast<double>(chunks.size());
    agg.sink_ratio = ratio_sum / n;
    agg.nll = nll_sum / n;
    for (auto& [key, acc] : agg.alpha_mean)
        for (double& v : acc) v /= n;
    agg.merged_trace = merge_magnitude_traces(traces);
    agg.steps = detect_step_blocks(agg.merged_trace, diag.jump);
    return agg;
}

}  // namespace

std::string RunReport::to_text() const {
    std::string out = "report {\n";
    out += std::string("  status = ") + (aborted ? "aborted" : "ok") + "\n";
    if (aborted) out += "  abort_step = " + std::to_string(abort_step) + "\n";
    if (has_perplexity) out += "  perplexity = " + format_double(perplexity) + "\n";
    if (has_sink_ratio) out += "  sink_ratio = " + format_double(sink_ratio) + "\n";
    if (has_spike) out += "  spike = " + format_double(spike) + "\n";
    out += "}\n";
    if (!artifacts.empty()) {
        out += "artifacts {\n";
        for (const auto& [name, path] : artifacts) out += "  " + name + " = " + path + "\n";
        out += "}\n";
    }
    return out;
}

RunReport run_train(const ExperimentConfig& cfg) {
    cfg.model.validate();
    cfg.train.validate();
    cfg.diagnostics.validate();
    ensure_dir(cfg.output_dir);

    Corpus corpus = load_corpus(cfg.corpus_path);
    std::vector<Chunk> chunks = chunk_corpus(corpus, cfg.train.seq_len);
    CorpusSplit split = split_chunks(std::move(chunks), cfg.diagnostics.eval_chunks,
                                     cfg.train.seed + 2);

    TrainResult result =
        train_run(cfg.model, cfg.train, split.train, split.eval, cfg.output_dir);

    // Artifact paths are recorded relative to the output directory so the
    // report depends only on (config, seed, corpus).
    RunReport report;
    write_text_file(join(cfg.output_dir, "metrics.log"), metrics_text(result.log));
    report.artifacts.emplace_back("metrics", "metrics.log");
    if (!result.last_checkpoint.empty())
        report.artifacts.emplace_back("checkpoint",
                                      fs::path(result.last_checkpoint).filename().string());

    if (result.aborted) {
        report.aborted = true;
        report.abort_step = result.abort_step;
    } else {
        report.has_perplexity = result.evaluated;
        report.perplexity = result.perplexity;
        const std::vector<Chunk> eval_chunks =
            rechunk(split.eval, cfg.diagnostics.eval_seq_len);
        EvalAggregate agg =
            evaluate_model(result.params, cfg.model, eval_chunks, cfg.diagnostics);
        report.has_sink_ratio = true;
        report.sink_ratio = agg.sink_ratio;
        report.has_spike = true;
        report.spike = agg.spike;
    }
    write_text_file(join(cfg.output_dir, "report.txt"), report.to_text());
    report.artifacts.emplace_back("report", "report.txt");
    return report;
}

RunReport run_diagnose(const std::string& checkpoint_path, const std::string& corpus_path,
                       const DiagnosticsConfig& diag, const std::string& out_dir,
                       std::uint64_t eval_seed) {
    diag.validate();
    ensure_dir(out_dir);
    LoadedCheckpoint loaded = load_checkpoint(checkpoint_path);

    Corpus corpus = load_corpus(corpus_path);
    std::vector<Chunk> chunks = chunk_corpus(corpus, diag.eval_seq_len);
    std::vector<Chunk> eval_chunks;
    if (chunks.size() <= diag.eval_chunks) {
        eval_chunks = std::move(chunks);
    } else {
        CorpusSplit split = split_chunks(std::move(chunks), diag.eval_chunks, eval_seed);
        eval_chunks = std::move(split.eval);
    }

    EvalAggregate agg = evaluate_model(loaded.params, loaded.cfg, eval_chunks, diag);

    RunReport report;
    report.has_perplexity = true;
    report.perplexity = std::exp(agg.nll);
    report.has_sink_ratio = true;
    report.sink_ratio = agg.sink_ratio;
    report.has_spike = true;
    report.spike = agg.spike;

    // Magnitude trace (per-depth top-k of post-residuals and block outputs).
    {
        Table t = make_table({{"block", 'i'},
                              {"kind", 's'},
                              {"rank", 'i'},
                              {"token", 'i'},
                              {"channel", 'i'},
                              {"value", 'r'},
                              {"magnitude", 'r'}});
        auto emit = [&](const std::vector<std::vector<MagnitudeEntry>>& lists,
                        const std::string& kind, std::int64_t block0) {
            for (std::size_t s = 0; s < lists.size(); ++s)
                for (std::size_t r = 0; r < lists[s].size(); ++r) {
                    const MagnitudeEntry& e = lists[s][r];
                    t.add_row({static_cast<std::int64_t>(s) + block0, kind,
                               static_cast<std::int64_t>(r),
                               static_cast<std::int64_t>(e.token),
                               static_cast<std::int64_t>(e.channel), e.value, e.magnitude});
                }
        };
        emit(agg.merged_trace.post_residual, "post_residual", 0);  // block 0 = embedding state
        emit(agg.merged_trace.block_output, "block_output", 1);
        write_text_file(join(out_dir, "magnitude_trace.csv"), emit_csv(t));
        report.artifacts.emplace_back("magnitude_trace", "magnitude_trace.csv");
    }

    // Step-up / step-down events.
    {
        Table t = make_table({{"kind", 's'}, {"block", 'i'}, {"ratio", 'r'}});
        for (const StepEvent& e : agg.steps.step_up)
            t.add_row({std::string("step_up"), static_cast<std::int64_t>(e.block), e.ratio});
        for (const StepEvent& e : agg.steps.step_down)
            t.add_row({std::string("step_down"), static_cast<std::int64_t>(e.block), e.ratio});
        write_text_file(join(out_dir, "step_blocks.csv"), emit_csv(t));
        report.artifacts.emplace_back("step_blocks", "step_blocks.csv");
    }

    // Spike report.
    {
        Table t = make_table({{"token", 'i'}, {"channel", 'i'}});
        for (std::size_t tok : agg.merged_spikes.spike_tokens)
            for (std::size_t ch : agg.merged_spikes.spike_channels)
                t.add_row({static_cast<std::int64_t>(tok), static_cast<std::int64_t>(ch)});
        write_text_file(join(out_dir, "spike_cells.csv"), emit_csv(t));
        Table r = make_table({{"channel_a", 'i'}, {"channel_b", 'i'}, {"ratio", 'r'}});
        const auto& channels = agg.merged_spikes.spike_channels;
        for (std::size_t i = 0; i < channels.size(); ++i)
            for (std::size_t j = 0; j < channels.size(); ++j)
                r.add_row({static_cast<std::int64_t>(channels[i]),
                           static_cast<std::int64_t>(channels[j]),
                           agg.merged_spikes.channel_ratio_matrix[i][j]});
        write_text_file(join(out_dir, "spike_ratio_matrix.csv"), emit_csv(r));
        report.artifacts.emplace_back("spike_cells", "spike_cells.csv");
        report.artifacts.emplace_back("spike_ratio_matrix", "spike_ratio_matrix.csv");
    }

    // Sink importance scores, averaged over eval sequences.
    {
        Table t = make_table(
            {{"block", 'i'}, {"head", 'i'}, {"position", 'i'}, {"alpha", 'r'}});
        for (const auto& [key, alpha] : agg.alpha_mean)
            for (std::size_t k = 0; k < alpha.size(); ++k)
                t.add_row({static_cast<std::int64_t>(key.first),
                           static_cast<std::int64_t>(key.second),
                           static_cast<std::int64_t>(k + 1), alpha[k]});
        write_text_file(join(out_dir, "sink_alpha.csv"), emit_csv(t));
        report.artifacts.emplace_back("sink_alpha", "sink_alpha.csv");
    }

    // Quadratic-form Frobenius norms and eigen spectra for swiglu blocks.
    if (loaded.cfg.ffn_kind == FfnKind::swiglu) {
        Table ft = make_table({{"block", 'i'}, {"channel", 'i'}, {"frobenius", 'r'}});
        Table et = make_table({{"block", 'i'},
                               {"channel", 'i'},
                               {"group", 's'},
                               {"eig_rank", 'i'},
                               {"eigenvalue", 'r'}});
        Table dt = make_table(
            {{"block", 'i'}, {"channel", 'i'}, {"lambda", 'r'}, {"residual", 'r'}});
        for (std::size_t b = 0; b < loaded.params.blocks.size(); ++b) {
            const Block& block = loaded.params.blocks[b];
            if (block.is_attention) continue;
            std::vector<double> frobs(loaded.cfg.d_model);
            std::vector<QuadraticFormResult> forms;
            forms.reserve(loaded.cfg.d_model);
            for (std::size_t k = 0; k < loaded.cfg.d_model; ++k) {
                forms.push_back(quadratic_form(block.ffn, k));
                frobs[k] = forms.back().frobenius;
                ft.add_row({static_cast<std::int64_t>(b + 1), static_cast<std::int64_t>(k),
                            frobs[k]});
            }
            // Spectra for the top-norm channels and an equal count of median
            // channels for contrast.
            std::vector<std::size_t> by_norm(frobs.size());
            for (std::size_t k = 0; k < frobs.size(); ++k) by_norm[k] = k;
            std::sort(by_norm.begin(), by_norm.end(),
                      [&](std::size_t a, std::size_t c) { return frobs[a] > frobs[c]; });
            const std::size_t n_top = std::min<std::size_t>(diag.top_k, by_norm.size());
            std::vector<std::pair<std::size_t, std::string>> selected;
            for (std::size_t i = 0; i < n_top; ++i)
                selected.emplace_back(by_norm[i], "top_norm");
            for (std::size_t i = 0; i < n_top && by_norm.size() / 2 + i < by_norm.size(); ++i)
                selected.emplace_back(by_norm[by_norm.size() / 2 + i], "typical");
            for (const auto& [channel, group] : selected) {
                const std::vector<double> eig = symmetric_eigenvalues(forms[channel].s);
                for (std::size_t r = 0; r < eig.size(); ++r)
                    et.add_row({static_cast<std::int64_t>(b + 1),
                                static_cast<std::int64_t>(channel), group,
                                static_cast<std::int64_t>(r), eig[r]});
                if (group == "top_norm") {
                    try {
                        EigenResult top = top_eigenpair(forms[channel].s);
                        dt.add_row({static_cast<std::int64_t>(b + 1),
                                    static_cast<std::int64_t>(channel), top.lambda,
                                    top.residual});
                    } catch (const ConvergenceError&) {
                        // Degenerate tie; the full spectrum row still records it.
                    }
                }
            }
        }
        write_text_file(join(out_dir, "frobenius.csv"), emit_csv(ft));
        write_text_file(join(out_dir, "eigen_spectrum.csv"), emit_csv(et));
        write_text_file(join(out_dir, "eigen_dominant.csv"), emit_csv(dt));
        report.artifacts.emplace_back("frobenius", "frobenius.csv");
        report.artifacts.emplace_back("eigen_spectrum", "eigen_spectrum.csv");
        report.artifacts.emplace_back("eigen_dominant", "eigen_dominant.csv");
    }

    write_text_file(join(out_dir, "report.txt"), report.to_text());
    report.artifacts.emplace_back("report", "report.txt");
    return report;
}

std::vector<AblationVariant> parse_suite(const std::string& path) {
    ConfigDoc doc = ConfigDoc::parse_file(path);
    std::vector<AblationVariant> variants;
    std::map<std::string, std::size_t> index;
    for (const std::string& key : doc.keys()) {
        if (key.rfind("variant ", 0) != 0)
            throw ConfigError("suite '" + path + "': key '" + key +
                              "' is outside a 'variant <name>' section");
        const std::size_t dot = key.find('.');
        if (dot == std::string::npos)
            throw ConfigError("suite '" + path + "': bare value '" + key + "'");
        const std::string name = key.substr(8, dot - 8);
        if (name.empty()) throw ConfigError("suite '" + path + "': variant needs a name");
        const std::string override_key = key.substr(dot + 1);
        auto it = index.find(name);
        if (it == index.end()) {
            index[name] = variants.size();
            variants.push_back({name, {}});
            it = index.find(name);
        }
        variants[it->second].overrides.emplace_back(override_key, doc.get_string(key));
    }
    doc.finish();
    return variants;
}

Table run_ablation_suite(const std::string& baseline_config_path,
                         const std::vector<AblationVariant>& variants,
                         const std::string& out_dir) {
    ensure_dir(out_dir);
    const std::string baseline_text = read_text_file(baseline_config_path);

    Table table = make_table({{"setup", 's'},
                              {"perplexity", 'r'},
                              {"sink_ratio", 'r'},
                              {"spike", 'r'},
                              {"status", 's'}});

    auto run_one = [&](const std::string& name,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
        double ppl = 0.0, sink = 0.0, spike = 0.0;
        std::string status = "ok";
        try {
            ConfigDoc doc = ConfigDoc::parse_string(baseline_text, baseline_config_path);
            for (const auto& [key, value] : overrides) doc.set(key, value);
            doc.set("output_dir", join(out_dir, name));
            ExperimentConfig cfg = read_experiment_config(doc);
            doc.finish();
            RunReport report = run_train(cfg);
            if (report.aborted) {
                status = "aborted at step " + std::to_string(report.abort_step);
            } else {
                ppl = report.perplexity;
                sink = report.sink_ratio;
                spike = report.spike;
            }
        } catch (const Error& e) {
            status = e.what();
            for (char& c : status)
                if (c == ',' || c == '\n') c = ';';
        }
        table.add_row({name, ppl, sink, spike, status});
    };

    run_one("baseline", {});
    for (const AblationVariant& variant : variants) run_one(variant.name, variant.overrides);

    write_text_file(join(out_dir, "ablation.csv"), emit_csv(table));
    write_text_file(join(out_dir, "ablation.txt"), render_table(table));
    return table;
}

}  // namespace sinklab
