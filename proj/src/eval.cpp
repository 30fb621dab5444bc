#include "edlab/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "edlab/error.hpp"
#include "edlab/parallel.hpp"

namespace edlab {

NllSum masked_nll(const Tensor& logits, std::span<const Token> targets, std::span<const std::uint8_t> mask) {
    if (targets.size() != logits.rows() || mask.size() != logits.rows())
        throw DimensionError("masked_nll: targets/mask length does not match logits rows");
    NllSum out;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (!mask[t]) continue;
        const auto row = logits.row(t);
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= row.size())
            throw ContractError("masked_nll: target " + std::to_string(targets[t]) + " outside vocabulary");
        const float mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (float x : row) z += std::exp(double(x) - mx);
        out.nll += mx + std::log(z) - row[static_cast<std::size_t>(targets[t])];
        ++out.tokens;
    }
    return out;
}

NllSum instance_nll(const System& sys, const Instance& inst) {
    if (!sys.processor) throw ContractError("system has no processor");
    const Sequence seq = layout_for(sys.regime, inst, sys.processor->config.max_seq);
    Tensor logits;
    if (sys.regime == Regime::editor) {
        if (!sys.editor) throw ContractError("editor system without an editor");
        logits = edited_forward(*sys.processor, *sys.editor, inst.instruction, seq.inputs(), sys.edit).logits;
    } else {
        logits = processor_forward(*sys.processor, seq.inputs()).logits;
    }
    return masked_nll(logits, seq.targets(), seq.mask());
}

namespace {

PerplexityResult finish(std::span<const NllSum> per, const std::map<std::string, NllSum>& tasks) {
    PerplexityResult r;
    for (const auto& p : per) {
        r.nll += p.nll;
        r.tokens += p.tokens;
    }
    if (r.tokens == 0) throw DegenerateInputError("evaluate_perplexity: no masked target tokens");
    r.instances = per.size();
    r.perplexity = std::exp(r.nll / double(r.tokens));
    for (const auto& [name, t] : tasks) r.per_task[name] = std::exp(t.nll / double(t.tokens));
    return r;
}

}  // namespace

PerplexityResult evaluate_perplexity(const System& sys, std::span<const Instance> split) {
    if (split.empty()) throw ContractError("evaluate_perplexity: empty split");
    std::vector<NllSum> per(split.size());
    parallel_for(split.size(), [&](std::size_t i) { per[i] = instance_nll(sys, split[i]); });

    // Aggregation runs in split order, independent of the thread count.
    std::map<std::string, NllSum> tasks;
    for (std::size_t i = 0; i < split.size(); ++i) {
        if (!split[i].task) continue;
        auto& t = tasks[task_name(*split[i].task)];
        t.nll += per[i].nll;
        t.tokens += per[i].tokens;
    }
    return finish(per, tasks);
}

PerplexityResult evaluate_perplexity(const Processor& processor, std::span<const Sequence> sequences) {
    if (sequences.empty()) throw ContractError("evaluate_perplexity: empty split");
    std::vector<NllSum> per(sequences.size());
    parallel_for(sequences.size(), [&](std::size_t i) {
        const Sequence& s = sequences[i];
        per[i] = masked_nll(processor_forward(processor, s.inputs()).logits, s.targets(), s.mask());
    });
    return finish(per, {});
}

double gap_closed(double ppl_ablated, double ppl_editor, double ppl_it) {
    if (!(ppl_ablated > ppl_it))
        throw UndefinedMetricError("gap_closed: ablated perplexity must exceed the instruction-tuned one");
    return (ppl_ablated - ppl_editor) / (ppl_ablated - ppl_it);
}

EvalReport layer_sweep(std::span<const std::size_t> layers, const SweepInputs& in) {
    if (!in.processor || !in.processor->params.frozen) throw ContractError("layer_sweep: needs a frozen processor");
    EvalReport report;
    for (std::size_t layer : layers) {
        EditSpec spec = in.edit;
        spec.layer = layer;
        spec.validate(in.processor->config);
        Editor editor = init_editor(in.editor_config, in.processor->config.d_model, spec.mode == EditMode::replace,
                                    in.train_config.seed);
        const TrainHooks hooks = in.hooks_for ? in.hooks_for(layer, editor) : TrainHooks{};
        TrainResult tr = train_editor(*in.processor, editor, in.train, in.eval, in.train_config, spec, hooks);
        if (in.on_trained) in.on_trained(layer, editor, tr);

        const System sys{Regime::editor, in.processor, &editor, spec};
        LayerResult lr;
        lr.layer = layer;
        lr.eval_ppl = evaluate_perplexity(sys, in.eval).perplexity;
        if (!in.held_out.empty()) lr.held_out_ppl = evaluate_perplexity(sys, in.held_out).perplexity;
        if (in.ppl_ablated && in.ppl_it && *in.ppl_ablated > *in.ppl_it)
            lr.gap_closed = gap_closed(*in.ppl_ablated, lr.eval_ppl, *in.ppl_it);
        report.layers.push_back(lr);
    }
    if (in.ppl_ablated) report.split_ppl["ablated"] = *in.ppl_ablated;
    if (in.ppl_it) report.split_ppl["instruction-tune"] = *in.ppl_it;
    return report;
}

namespace {

struct SiteValues {
    Tensor h;
    Tensor delta;
};

SiteValues edit_site(const System& sys, const Instance& inst) {
    if (sys.regime != Regime::editor || !sys.editor || !sys.processor)
        throw ContractError("sparsity statistics need an editor system");
    const Sequence seq = layout_processor(inst.input, inst.target, sys.processor->config.max_seq);
    Graph g;
    BoundParams pp(g, sys.processor->params);
    BoundParams ep(g, sys.editor->params);
    EditedVars ev = edited_forward(pp, sys.processor->config, ep, *sys.editor, inst.instruction, seq.inputs(), sys.edit);
    return {ev.h.value(), ev.delta.value()};
}

}  // namespace

double edit_site_rms(const System& sys, std::span<const Instance> split) {
    if (split.empty()) throw ContractError("edit_site_rms: empty split");
    std::vector<double> sq(split.size());
    parallel_for(split.size(), [&](std::size_t i) {
        const Tensor h = edit_site(sys, split[i]).h;
        double s = 0.0;
        for (float x : h.data) s += double(x) * x;
        sq[i] = s;
    });
    const std::size_t width = sys.processor->config.d_model;
    const double total = std::accumulate(sq.begin(), sq.end(), 0.0);
    return std::sqrt(total / double(split.size() * width));
}

double default_tau(const System& sys, std::span<const Instance> split) { return 0.01 * edit_site_rms(sys, split); }

SparsityReport sparsity_report(const System& sys, std::span<const Instance> split, double tau, std::size_t top_k) {
    if (!(tau > 0.0)) throw ContractError("sparsity_report: tau must be > 0");
    if (split.size() < kMinSparsityInstances)
        throw ContractError("sparsity_report: needs at least " + std::to_string(kMinSparsityInstances) +
                            " instances, got " + std::to_string(split.size()));
    std::vector<Tensor> deltas(split.size());
    parallel_for(split.size(), [&](std::size_t i) { deltas[i] = edit_site(sys, split[i]).delta; });

    const std::size_t d = deltas.front().size();
    SparsityReport r;
    r.tau = tau;
    r.instances = split.size();
    r.mean_abs_delta.assign(d, 0.0);
    std::size_t active = 0;
    for (const auto& delta : deltas) {
        double l1 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double a = std::fabs(double(delta.data[j]));
            r.mean_abs_delta[j] += a;
            l1 += a;
            if (a > tau) ++active;
        }
        r.mean_l1 += l1;
    }
    for (double& m : r.mean_abs_delta) m /= double(split.size());
    r.mean_l1 /= double(split.size());
    r.active_fraction = double(active) / double(split.size() * d);

    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return r.mean_abs_delta[a] > r.mean_abs_delta[b]; });
    order.resize(std::min(top_k, d));
    r.top_dims = std::move(order);
    return r;
}

LocalityDiff locality_check(const HiddenStates& edited, const HiddenStates& unedited, const EditSpec& spec) {
    LocalityDiff diff;
    auto fail = [&](std::size_t layer, std::optional<std::size_t> row, std::string detail) {
        diff.ok = false;
        diff.layer = layer;
        diff.row = row;
        diff.detail = std::move(detail);
        return diff;
    };
    if (edited.layers.size() != unedited.layers.size())
        return fail(0, std::nullopt, "state counts differ");
    if (spec.layer >= edited.layers.size()) return fail(spec.layer, std::nullopt, "edit layer beyond recorded states");
    for (std::size_t l = 0; l < spec.layer; ++l)
        if (!edited.layers[l].bitwise_equal(unedited.layers[l]))
            return fail(l, std::nullopt, "state before the edit layer differs at layer " + std::to_string(l));
    const Tensor& a = edited.layers[spec.layer];
    const Tensor& b = unedited.layers[spec.layer];
    if (a.shape != b.shape) return fail(spec.layer, std::nullopt, "shape differs at the edit layer");
    for (std::size_t r = 0; r < a.rows(); ++r) {
        if (r == spec.position) continue;
        const auto ra = a.row(r), rb = b.row(r);
        if (!std::equal(ra.begin(), ra.end(), rb.begin(), [](float x, float y) {
                return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
            }))
            return fail(spec.layer, r, "off-site row " + std::to_string(r) + " differs at the edit layer");
    }
    return diff;
}

}  // namespace edlab
