#include "edlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "edlab/error.hpp"
#include "edlab/parallel.hpp"
#include "edlab/eval.hpp"

namespace edlab {

std::string to_string(Regime r) {
    switch (r) {
        case Regime::editor: return "editor";
        case Regime::instruction_tuned: return "instruction-tune";
        case Regime::ablated: return "ablated";
    }
    return "?";
}

Regime parse_regime(const std::string& s) {
    if (s == "editor") return Regime::editor;
    if (s == "instruction-tune") return Regime::instruction_tuned;
    if (s == "ablated") return Regime::ablated;
    throw ContractError("unknown regime '" + s + "' (expected editor|instruction-tune|ablated)");
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ContractError("lr must be finite and >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ContractError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ContractError("Adam eps must be > 0");
    if (batch_size == 0) throw ContractError("batch_size must be >= 1");
    if (steps == 0) throw ContractError("steps must be >= 1");
    if (!(clip_norm >= 0.0)) throw ContractError("clip_norm must be >= 0");
    if (log_every == 0) throw ContractError("log_every must be >= 1");
}

OptimizerState OptimizerState::zeros_like(const Params& params) {
    OptimizerState s;
    for (const auto& t : params.tensors()) {
        s.m.emplace_back(t.value.shape);
        s.v.emplace_back(t.value.shape);
    }
    return s;
}

void adam_step(Params& params, std::span<const Tensor> grads, OptimizerState& state, const TrainConfig& config) {
    auto& ts = params.tensors();
    if (grads.size() != ts.size() || state.m.size() != ts.size() || state.v.size() != ts.size())
        throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients / " +
                             std::to_string(state.m.size()) + " moments for " + std::to_string(ts.size()) +
                             " parameters");
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (grads[i].shape != ts[i].value.shape || state.m[i].shape != ts[i].value.shape ||
            state.v[i].shape != ts[i].value.shape)
            throw DimensionError("adam_step: shape mismatch for " + ts[i].name);
        if (!grads[i].all_finite()) throw NumericError("adam_step: non-finite gradient for " + ts[i].name);
    }
    if (params.frozen) return;

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const auto b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
    const auto bc1 = static_cast<float>(1.0 - std::pow(config.beta1, t));
    const auto bc2 = static_cast<float>(1.0 - std::pow(config.beta2, t));
    const auto lr = static_cast<float>(config.lr), eps = static_cast<float>(config.eps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        float* p = ts[i].value.data.data();
        float* m = state.m[i].data.data();
        float* v = state.v[i].data.data();
        const float* g = grads[i].data.data();
        for (std::size_t j = 0; j < ts[i].value.size(); ++j) {
            m[j] = b1 * m[j] + (1.0f - b1) * g[j];
            v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
            const float mhat = m[j] / bc1;
            const float vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

double clip_global_norm(std::span<Tensor> grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (float x : g.data) sq += double(x) * x;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const float s = static_cast<float>(max_norm / norm);
        for (auto& g : grads)
            for (float& x : g.data) x *= s;
    }
    return norm;
}

Sequence layout_for(Regime regime, const Instance& inst, std::size_t max_seq) {
    if (regime == Regime::instruction_tuned)
        return layout_instruction_tuned(inst.instruction, inst.input, inst.target, max_seq);
    return layout_processor(inst.input, inst.target, max_seq);
}

namespace {

struct SampleGradients {
    double loss = 0.0;
    double ce = 0.0;
    double l1 = 0.0;
    std::vector<Tensor> grads;
};

template <class Fn>
BatchGradients reduce_batch(std::size_t n, const Params& trained, Execution exec, Fn&& per_sample) {
    if (n == 0) throw DegenerateInputError("empty batch");
    std::vector<SampleGradients> samples(n);
    if (exec == Execution::parallel) {
        parallel_for(n, [&](std::size_t i) { samples[i] = per_sample(i); });
    } else {
        for (std::size_t i = 0; i < n; ++i) samples[i] = per_sample(i);
    }

    BatchGradients out;
    for (const auto& t : trained.tensors()) out.grads.emplace_back(t.value.shape);
    for (const auto& s : samples) {
        out.loss += s.loss;
        out.ce += s.ce;
        out.l1_mean += s.l1;
        for (std::size_t k = 0; k < out.grads.size(); ++k) {
            auto& acc = out.grads[k].data;
            const auto& g = s.grads[k].data;
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
        }
    }
    const float inv = 1.0f / static_cast<float>(n);
    for (auto& g : out.grads)
        for (float& x : g.data) x *= inv;
    out.loss /= double(n);
    out.ce /= double(n);
    out.l1_mean /= double(n);
    return out;
}

std::vector<Tensor> collect_grads(const Graph& g, const BoundParams& bound) {
    std::vector<Tensor> grads;
    grads.reserve(bound.vars().size());
    for (Var v : bound.vars()) grads.push_back(*g.grad(v));
    return grads;
}

}  // namespace

BatchGradients editor_batch_gradients(const Processor& processor, const Editor& editor,
                                      std::span<const Instance* const> batch, const EditSpec& spec, Execution exec) {
    return reduce_batch(batch.size(), editor.params, exec, [&](std::size_t i) {
        const Instance& inst = *batch[i];
        const Sequence seq = layout_processor(inst.input, inst.target, processor.config.max_seq);
        Graph g;
        BoundParams pp(g, processor.params);
        BoundParams ep(g, editor.params);
        EditedVars ev =
            edited_forward(pp, processor.config, ep, editor, inst.instruction, seq.inputs(), spec);
        Var ce = cross_entropy(ev.logits, seq.targets(), seq.mask());
        Var l1 = l1_penalty(ev.h, ev.h_edited);
        Var loss = spec.lambda_l1 > 0.0 ? add(ce, scale(l1, static_cast<float>(spec.lambda_l1))) : ce;
        g.backward(loss, ep.vars());
        return SampleGradients{loss.value()[0], ce.value()[0], l1.value()[0], collect_grads(g, ep)};
    });
}

BatchGradients baseline_batch_gradients(const Processor& processor, std::span<const Instance* const> batch,
                                        Regime regime, Execution exec) {
    if (regime == Regime::editor) throw ContractError("baseline_batch_gradients: editor regime");
    return reduce_batch(batch.size(), processor.params, exec, [&](std::size_t i) {
        const Sequence seq = layout_for(regime, *batch[i], processor.config.max_seq);
        Graph g;
        BoundParams pp(g, processor.params);
        ForwardVars fw = transformer_forward(pp, processor.config, seq.inputs());
        Var ce = cross_entropy(fw.logits, seq.targets(), seq.mask());
        g.backward(ce, pp.vars());
        return SampleGradients{ce.value()[0], ce.value()[0], 0.0, collect_grads(g, pp)};
    });
}

namespace {

// Epoch-wise shuffled minibatches.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed ^ 0x5eed0fdba7a5e7ull) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
    }

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        out.reserve(batch);
        while (out.size() < batch) {
            if (cursor_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                cursor_ = 0;
            }
            out.push_back(order_[cursor_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> order_;
    std::mt19937_64 rng_;
    std::size_t cursor_ = 0;
};

template <class GradFn, class EvalFn>
TrainResult run_loop(Params& trained, std::span<const Instance> train, const TrainConfig& cfg,
                     const TrainHooks& hooks, GradFn&& grad_fn, EvalFn&& eval_fn) {
    cfg.validate();
    if (train.empty()) throw DegenerateInputError("training split is empty");
    TrainResult result;
    result.optimizer = OptimizerState::zeros_like(trained);
    BatchSampler sampler(train.size(), cfg.seed);

    double loss_acc = 0.0, l1_acc = 0.0;
    std::size_t acc_steps = 0;
    std::vector<const Instance*> batch(cfg.batch_size);
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const auto idx = sampler.next(cfg.batch_size);
        for (std::size_t i = 0; i < idx.size(); ++i) batch[i] = &train[idx[i]];
        BatchGradients bg = grad_fn(std::span<const Instance* const>(batch));
        if (!std::isfinite(bg.loss))
            throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
        for (std::size_t k = 0; k < bg.grads.size(); ++k)
            if (!bg.grads[k].all_finite())
                throw NumericError("non-finite gradient for " + trained.tensors()[k].name + " at step " +
                                   std::to_string(step));
        clip_global_norm(bg.grads, cfg.clip_norm);
        adam_step(trained, bg.grads, result.optimizer, cfg);

        loss_acc += bg.loss;
        l1_acc += bg.l1_mean;
        ++acc_steps;
        const bool eval_now = (cfg.eval_every && step % cfg.eval_every == 0) || step == cfg.steps;
        if (step % cfg.log_every == 0 || step == cfg.steps || eval_now) {
            MetricsRecord rec{step, loss_acc / double(acc_steps), std::nullopt, l1_acc / double(acc_steps)};
            if (eval_now) rec.eval_ppl = eval_fn();
            result.history.push_back(rec);
            if (hooks.on_metrics) hooks.on_metrics(rec);
            loss_acc = l1_acc = 0.0;
            acc_steps = 0;
        }
        if (hooks.on_checkpoint && hooks.checkpoint_every && step % hooks.checkpoint_every == 0)
            hooks.on_checkpoint(step, result.optimizer);
    }
    return result;
}

std::span<const Instance> limit(std::span<const Instance> s, std::size_t n) {
    return n == 0 || n >= s.size() ? s : s.first(n);
}

}  // namespace

TrainResult train_editor(const Processor& processor, Editor& editor, std::span<const Instance> train,
                         std::span<const Instance> eval, const TrainConfig& cfg, const EditSpec& spec,
                         const TrainHooks& hooks) {
    if (!processor.params.frozen) throw ContractError("train_editor: processor must be frozen");
    if (editor.params.frozen) throw ContractError("train_editor: editor is frozen");
    spec.validate(processor.config);
    const auto eval_split = limit(eval, cfg.eval_limit);
    return run_loop(
        editor.params, train, cfg, hooks,
        [&](std::span<const Instance* const> batch) {
            return editor_batch_gradients(processor, editor, batch, spec);
        },
        [&]() -> std::optional<double> {
            if (eval_split.empty()) return std::nullopt;
            return evaluate_perplexity({Regime::editor, &processor, &editor, spec}, eval_split).perplexity;
        });
}

TrainResult train_baseline(Processor& processor, std::span<const Instance> train, std::span<const Instance> eval,
                           Regime regime, const TrainConfig& cfg, const TrainHooks& hooks) {
    if (regime == Regime::editor) throw ContractError("train_baseline: use train_editor for the editor regime");
    if (processor.params.frozen) throw ContractError("train_baseline: processor is frozen");
    const auto eval_split = limit(eval, cfg.eval_limit);
    return run_loop(
        processor.params, train, cfg, hooks,
        [&](std::span<const Instance* const> batch) {
            return baseline_batch_gradients(processor, batch, regime);
        },
        [&]() -> std::optional<double> {
            if (eval_split.empty()) return std::nullopt;
            return evaluate_perplexity({regime, &processor, nullptr, {}}, eval_split).perplexity;
        });
}

}  // namespace edlab
