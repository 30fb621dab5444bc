#include "edlab/experiment.hpp"

#include <fstream>
#include <sstream>

#include "edlab/error.hpp"

namespace edlab {

std::vector<Instance> load_split(const fs::path& path, std::size_t max_seq) {
    if (!fs::exists(path)) throw ConfigError("data file not found: " + path.string());
    return load_alpaca_jsonl(path, max_seq).instances;  // the loader warns about skipped lines
}

Dataset load_data(const DataConfig& c, std::size_t max_seq) {
    if (c.train.empty()) {
        GenOptions opt;
        opt.n_eval = c.n_eval;
        opt.n_held_out = c.n_held_out;
        opt.min_len = c.min_len;
        opt.max_len = c.max_len;
        return gen_dataset(c.tasks, c.n_train, c.seed, opt);
    }
    Dataset d;
    if (c.eval.empty()) {
        // A single alpaca-style file: deterministic 90/10 split.
        d = split_by_hash(load_split(c.train, max_seq));
    } else {
        d.train = load_split(c.train, max_seq);
        d.eval = load_split(c.eval, max_seq);
    }
    if (!c.held_out.empty()) d.held_out = load_split(c.held_out, max_seq);
    if (d.train.empty()) throw ConfigError("data: no usable training instances in " + c.train);
    if (d.eval.empty()) throw ConfigError("data: no usable eval instances");
    return d;
}

Processor frozen_processor(const RunConfig& config) {
    Processor p;
    if (config.processor_ckpt.empty()) {
        p = init_processor(config.processor, config.train.seed);
    } else {
        p = load_checkpoint(config.processor_ckpt).processor;
        if (!(p.config == config.processor))
            throw ConfigError("processor_ckpt " + config.processor_ckpt +
                              " does not match the configured processor shape");
    }
    p.params.frozen = true;
    return p;
}

std::string metrics_line(const MetricsRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["train_loss"] = r.train_loss;
    j["eval_ppl"] = r.eval_ppl ? nlohmann::ordered_json(*r.eval_ppl) : nlohmann::ordered_json(nullptr);
    j["l1_mean"] = r.l1_mean;
    return j.dump();
}

namespace {

// Write-then-rename so a crash mid-save never leaves a torn checkpoint.
void save_atomically(const Checkpoint& c, const fs::path& path) {
    fs::path tmp = path;
    tmp += ".tmp";
    save_checkpoint(c, tmp);
    fs::rename(tmp, path);
}

}  // namespace

System system_of(const Checkpoint& c) {
    return {c.regime, &c.processor, c.editor ? &*c.editor : nullptr, c.edit};
}

RunOutcome run_training(const RunConfig& config, Regime regime, const Dataset& data, const fs::path& dir,
                        std::size_t checkpoint_every) {
    config.validate();
    fs::create_directories(dir);
    write_json_file(dir / kConfigFile, to_json(config));

    std::ofstream metrics(dir / kMetricsFile, std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (dir / kMetricsFile).string());

    RunOutcome out;
    Checkpoint& ck = out.checkpoint;
    ck.regime = regime;
    ck.edit = config.edit;
    ck.train = config.train;

    TrainHooks hooks;
    hooks.on_metrics = [&](const MetricsRecord& r) { metrics << metrics_line(r) << '\n' << std::flush; };
    hooks.checkpoint_every = checkpoint_every;
    hooks.on_checkpoint = [&](std::size_t, const OptimizerState& opt) {
        ck.optimizer = opt;
        save_atomically(ck, dir / kCheckpointFile);
    };

    if (regime == Regime::editor) {
        ck.processor = frozen_processor(config);
        ck.editor = init_editor(config.editor, ck.processor.config.d_model, config.edit.mode == EditMode::replace,
                                config.train.seed);
        out.result = train_editor(ck.processor, *ck.editor, data.train, data.eval, config.train, config.edit, hooks);
    } else {
        ck.processor = init_processor(config.processor, config.train.seed);
        out.result = train_baseline(ck.processor, data.train, data.eval, regime, config.train, hooks);
    }
    ck.optimizer = out.result.optimizer;
    save_atomically(ck, dir / kCheckpointFile);

    const System sys = system_of(ck);
    const PerplexityResult ev = evaluate_perplexity(sys, data.eval);
    out.eval_ppl = ev.perplexity;
    EvalReport er;
    er.split_ppl["eval"] = ev.perplexity;
    er.task_ppl = ev.per_task;
    if (!data.held_out.empty()) {
        out.held_out_ppl = evaluate_perplexity(sys, data.held_out).perplexity;
        er.split_ppl["held_out"] = *out.held_out_ppl;
    }
    json report = to_json(er);
    report["regime"] = to_string(regime);
    report["tokens"] = ev.tokens;
    report["instances"] = ev.instances;
    write_json_file(dir / kReportFile, report);
    return out;
}

json to_json(const PerplexityResult& r) {
    return {{"perplexity", r.perplexity},
            {"nll", r.nll},
            {"tokens", r.tokens},
            {"instances", r.instances},
            {"per_task", r.per_task}};
}

json to_json(const EvalReport& r) {
    json layers = json::array();
    for (const auto& l : r.layers) {
        layers.push_back({{"layer", l.layer},
                          {"eval_ppl", l.eval_ppl},
                          {"held_out_ppl", l.held_out_ppl ? json(*l.held_out_ppl) : json(nullptr)},
                          {"gap_closed", l.gap_closed ? json(*l.gap_closed) : json(nullptr)}});
    }
    return {{"split_ppl", r.split_ppl},
            {"task_ppl", r.task_ppl},
            {"gap_closed", r.gap_closed ? json(*r.gap_closed) : json(nullptr)},
            {"layers", layers}};
}

json to_json(const SparsityReport& r) {
    return {{"instances", r.instances},           {"tau", r.tau},
            {"mean_l1", r.mean_l1},               {"active_fraction", r.active_fraction},
            {"top_dims", r.top_dims},             {"mean_abs_delta", r.mean_abs_delta}};
}

std::string sparsity_csv(const SparsityReport& r) {
    std::ostringstream out;
    out.precision(9);
    out << "dim,mean_abs_delta\n";
    for (std::size_t j = 0; j < r.mean_abs_delta.size(); ++j) out << j << ',' << r.mean_abs_delta[j] << '\n';
    return out.str();
}

}  // namespace edlab
