#include "edlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <span>

#include "edlab/data.hpp"
#include "edlab/eval.hpp"
#include "edlab/graph.hpp"
#include "edlab/intervene.hpp"
#include "edlab/model.hpp"
#include "edlab/reference.hpp"
#include "edlab/train.hpp"

namespace edlab {

namespace {

using Rng = std::mt19937_64;

Tensor randn(Rng& rng, Shape shape, float stddev = 1.0f) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> d(0.0f, stddev);
    for (float& v : t.data) v = d(rng);
    return t;
}

// Values bounded away from zero so |x| has no kink inside the FD stencil.
Tensor randn_off_zero(Rng& rng, Shape shape) {
    Tensor t = randn(rng, std::move(shape));
    for (float& v : t.data) v += v >= 0.0f ? 0.1f : -0.1f;
    return t;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - n[i]) * (a[i] - n[i]);
        na += a[i] * a[i];
        nn += n[i] * n[i];
    }
    const double denom = std::max(std::sqrt(na), std::sqrt(nn));
    return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

// An op under test: builds its output from graph inputs. The probe loss
// is sum(w * out) with fixed random w, evaluated in double for the
// numeric side.
struct OpCase {
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Var(Graph&, std::span<const Var>)> build;
    // Optional double-precision readback of a scalar output, used where
    // the float32 scalar itself would round away the difference.
    std::function<double(std::span<const Tensor>)> exact = {};
};

double probe_loss(const Tensor& out, const Tensor& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += double(out.data[i]) * w.data[i];
    return acc;
}

GradCheckResult check_op(const OpCase& c, std::uint64_t seed, const GradCheckOptions& opt) {
    Rng rng(seed * 7919 + 17);
    Tensor w;
    std::vector<double> analytic;
    {
        Graph g;
        std::vector<Var> vars;
        for (const auto& t : c.inputs) vars.push_back(g.input(t));
        Var out = c.build(g, vars);
        w = randn(rng, out.value().shape);
        Var loss = sum(mul(out, g.input(w)));
        g.backward(loss, vars);
        for (Var v : vars)
            for (float x : g.grad(v)->data) analytic.push_back(x);
    }
    std::vector<double> numeric;
    std::vector<Tensor> inputs = c.inputs;
    auto eval = [&]() {
        if (c.exact) return c.exact(inputs) * w.data[0];
        Graph g;
        std::vector<Var> vars;
        for (const auto& t : inputs) vars.push_back(g.input(t));
        return probe_loss(c.build(g, vars).value(), w);
    };
    for (auto& t : inputs) {
        for (std::size_t j = 0; j < t.size(); ++j) {
            const float orig = t.data[j];
            t.data[j] = orig + static_cast<float>(opt.eps);
            const double up = eval();
            t.data[j] = orig - static_cast<float>(opt.eps);
            const double down = eval();
            t.data[j] = orig;
            numeric.push_back((up - down) / (2.0 * opt.eps));
        }
    }
    GradCheckResult r{c.name, seed, rel_error(analytic, numeric), analytic.size(), 0, false};
    r.pass = r.rel_error < opt.tolerance;
    return r;
}

std::vector<OpCase> op_cases(std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> ext(1, 4);
    const std::size_t m = ext(rng) + 1, k = ext(rng) + 1, n = ext(rng) + 1;
    std::vector<OpCase> cases;
    auto bin = [](auto f) { return [f](Graph&, std::span<const Var> v) { return f(v[0], v[1]); }; };
    auto un = [](auto f) { return [f](Graph&, std::span<const Var> v) { return f(v[0]); }; };

    cases.push_back({"add", {randn(rng, {m, n}), randn(rng, {m, n})}, bin([](Var a, Var b) { return add(a, b); })});
    cases.push_back({"sub", {randn(rng, {m, n}), randn(rng, {m, n})}, bin([](Var a, Var b) { return sub(a, b); })});
    cases.push_back({"mul", {randn(rng, {m, n}), randn(rng, {m, n})}, bin([](Var a, Var b) { return mul(a, b); })});
    cases.push_back({"scale", {randn(rng, {m, n})}, un([](Var a) { return scale(a, -1.7f); })});
    cases.push_back(
        {"add_bias", {randn(rng, {m, n}), randn(rng, {n})}, bin([](Var a, Var b) { return add_bias(a, b); })});
    cases.push_back(
        {"matmul", {randn(rng, {m, k}), randn(rng, {k, n})}, bin([](Var a, Var b) { return matmul(a, b); })});
    cases.push_back({"gelu", {randn(rng, {m, n}, 1.5f)}, un([](Var a) { return gelu(a); })});
    cases.push_back({"abs", {randn_off_zero(rng, {m, n})}, un([](Var a) { return abs(a); })});
    cases.push_back({"sum", {randn(rng, {m, n})}, un([](Var a) { return sum(a); })});
    cases.push_back({"softmax_rows", {randn(rng, {m, n + 1})}, un([](Var a) { return softmax_rows(a); })});
    {
        const std::size_t d = n + 2;
        Tensor gamma = randn(rng, {d}, 0.3f);
        for (float& v : gamma.data) v += 1.0f;
        cases.push_back({"layer_norm",
                         {randn(rng, {m, d}), gamma, randn(rng, {d})},
                         [](Graph&, std::span<const Var> v) { return layer_norm(v[0], v[1], v[2]); }});
    }
    {
        std::uniform_int_distribution<Token> id(0, static_cast<Token>(k));
        std::vector<Token> ids(m + 2);
        for (auto& t : ids) t = id(rng);
        cases.push_back({"embedding_lookup", {randn(rng, {k + 1, n})},
                         [ids](Graph&, std::span<const Var> v) { return embedding_lookup(v[0], ids); }});
    }
    cases.push_back(
        {"concat", {randn(rng, {m, k}), randn(rng, {m, n})}, bin([](Var a, Var b) { return concat(a, b); })});
    cases.push_back({"slice_rows", {randn(rng, {m + 2, n})}, un([m](Var a) { return slice_rows(a, 1, m); })});
    cases.push_back({"reshape", {randn(rng, {m, n})}, un([m, n](Var a) { return reshape(a, {n * m}); })});
    cases.push_back({"row", {randn(rng, {m, n})}, un([m](Var a) { return row(a, m - 1); })});
    cases.push_back({"with_row",
                     {randn(rng, {m, n}), randn(rng, {n})},
                     bin([m](Var a, Var b) { return with_row(a, m / 2, b); })});
    {
        const std::size_t heads = ext(rng) % 2 + 1, hd = ext(rng) + 1, T = m + 2;
        cases.push_back({"causal_self_attention", {randn(rng, {T, 3 * heads * hd})},
                         un([heads](Var a) { return causal_self_attention(a, heads); })});
    }
    {
        const std::size_t T = m + 2, V = n + 2;
        std::uniform_int_distribution<Token> id(0, static_cast<Token>(V - 1));
        std::vector<Token> targets(T);
        for (auto& t : targets) t = id(rng);
        Mask mask(T, 1);
        mask[0] = 0;
        cases.push_back({"cross_entropy", {randn(rng, {T, V}, 2.0f)},
                         [targets, mask](Graph&, std::span<const Var> v) {
                             return cross_entropy(v[0], targets, mask);
                         },
                         [targets, mask](std::span<const Tensor> in) {
                             const NllSum s = masked_nll(in[0], targets, mask);
                             return s.nll / double(s.tokens);
                         }});
    }
    {
        Tensor h = randn(rng, {n + 1});
        Tensor he = h;
        for (float& v : he.data) v += (v >= 0 ? 0.3f : -0.3f);  // every coordinate differs
        cases.push_back({"l1_penalty", {h, he}, bin([](Var a, Var b) { return l1_penalty(a, b); })});
    }
    return cases;
}

// Dense random parameters at a scale where gradients are O(1).
void randomize(Params& p, Rng& rng) {
    for (auto& t : p.tensors()) {
        const bool gain = t.name.ends_with(".g");
        t.value = randn(rng, t.value.shape, gain ? 0.1f : 0.3f);
        if (gain)
            for (float& v : t.value.data) v += 1.0f;
    }
}

struct EndToEnd {
    Processor processor;
    Editor editor;
    Instance inst;
    EditSpec spec;
};

EndToEnd make_end_to_end(std::uint64_t seed, EditMode mode) {
    Rng rng(seed * 104729 + 3);
    const ModelConfig pc{tok::kVocabSize, 16, 2, 2, 24, 32};
    const ModelConfig ec{tok::kVocabSize, 8, 1, 2, 16, 32};
    EndToEnd e{init_processor(pc, seed), init_editor(ec, pc.d_model, mode == EditMode::replace, seed + 1), {}, {}};
    randomize(e.processor.params, rng);
    randomize(e.editor.params, rng);
    e.processor.params.frozen = true;
    std::uniform_int_distribution<int> letter('a', 'z');
    std::string input(4, 'a');
    for (char& c : input) c = static_cast<char>(letter(rng));
    const Task task = kAllTasks[seed % std::size(kAllTasks)];
    e.inst = {tokenize(task_templates(task)[0]), tokenize(input), tokenize(apply_task(task, input)), task};
    e.spec.layer = 1;
    e.spec.position = seed % 2;
    e.spec.mode = mode;
    e.spec.lambda_l1 = 0.05;
    return e;
}

GradCheckResult check_end_to_end(std::uint64_t seed, EditMode mode, const GradCheckOptions& opt) {
    EndToEnd e = make_end_to_end(seed, mode);
    const Instance* batch[] = {&e.inst};
    // The training path's own gradient routine is the analytic side.
    const BatchGradients bg =
        editor_batch_gradients(e.processor, e.editor, batch, e.spec, Execution::serial);

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t k = 0; k < bg.grads.size(); ++k)
        for (std::size_t j = 0; j < bg.grads[k].size(); ++j)
            if (bg.grads[k].data[j] != 0.0f) coords.emplace_back(k, j);
    Rng rng(seed + 99);
    std::shuffle(coords.begin(), coords.end(), rng);
    if (coords.size() > opt.max_coords) coords.resize(opt.max_coords);

    // Numeric side: central differences of the independent double-precision
    // forward, so float32 rounding in the forward pass does not swamp the
    // O(eps^2) stencil.
    const Sequence seq = layout_processor(e.inst.input, e.inst.target, e.processor.config.max_seq);
    const auto targets = seq.targets();
    const Mask mask(seq.mask().begin(), seq.mask().end());
    const reference::Values pv = reference::to_double(e.processor.params);
    reference::Values ev = reference::to_double(e.editor.params);
    auto loss = [&] {
        return reference::edited_loss(e.processor, pv, e.editor, ev, e.inst.instruction, seq.inputs(), targets,
                                      mask, e.spec);
    };
    const double lambda = e.spec.lambda_l1;
    std::vector<double> analytic, numeric;
    std::size_t straddled = 0;
    for (auto [k, j] : coords) {
        double& x = ev[k][j];
        const double orig = x;
        x = orig + opt.eps;
        const auto up = loss();
        x = orig - opt.eps;
        const auto down = loss();
        x = orig;
        // A stencil that flips the sign of an edit coordinate crosses the
        // |.| kink of the L1 term; the difference quotient is meaningless there.
        if (up.delta_sign != down.delta_sign) {
            ++straddled;
            continue;
        }
        analytic.push_back(bg.grads[k].data[j]);
        numeric.push_back((up.ce + lambda * up.l1 - down.ce - lambda * down.l1) / (2.0 * opt.eps));
    }
    GradCheckResult r{std::string("edited_forward_loss/") + to_string(mode), seed, rel_error(analytic, numeric),
                      analytic.size(), straddled, false};
    r.pass = r.rel_error < opt.tolerance;
    return r;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
    std::vector<std::string> names;
    for (const auto& c : op_cases(0)) names.push_back(c.name);
    names.push_back("edited_forward_loss/add");
    names.push_back("edited_forward_loss/replace");
    return names;
}

std::vector<GradCheckResult> run_gradcheck_suite(const GradCheckOptions& opt,
                                                 const std::function<void(const GradCheckResult&)>& on_result) {
    std::vector<GradCheckResult> results;
    auto emit = [&](GradCheckResult r) {
        if (on_result) on_result(r);
        results.push_back(std::move(r));
    };
    for (std::uint64_t seed = 0; seed < opt.seeds; ++seed) {
        for (const auto& c : op_cases(seed)) emit(check_op(c, seed, opt));
        emit(check_end_to_end(seed, EditMode::add, opt));
        emit(check_end_to_end(seed, EditMode::replace, opt));
    }
    return results;
}

}  // namespace edlab
