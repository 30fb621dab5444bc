#include <cmath>
#include <limits>

#include "doctest.h"
#include "edlab/error.hpp"
#include "edlab/train.hpp"
#include "helpers.hpp"

using namespace edlab;

namespace {

Params scalar_param(float value) {
    Params p;
    p.add("x", Tensor::vector({value}));
    return p;
}

std::vector<Instance> small_split(std::size_t n, std::uint64_t seed, std::size_t max_len = 6) {
    GenOptions opt;
    opt.max_len = max_len;
    return gen_dataset(kAllTasks, n, seed, opt).train;
}

std::vector<const Instance*> pointers(const std::vector<Instance>& v) {
    std::vector<const Instance*> out;
    for (const auto& i : v) out.push_back(&i);
    return out;
}

bool grads_bitwise_equal(const BatchGradients& a, const BatchGradients& b) {
    if (a.grads.size() != b.grads.size()) return false;
    for (std::size_t i = 0; i < a.grads.size(); ++i)
        if (!a.grads[i].bitwise_equal(b.grads[i])) return false;
    return std::bit_cast<std::uint64_t>(a.loss) == std::bit_cast<std::uint64_t>(b.loss);
}

TrainConfig short_run(std::size_t steps) {
    TrainConfig c;
    c.steps = steps;
    c.batch_size = 4;
    c.log_every = 2;
    c.eval_every = 3;
    c.lr = 1e-3;
    return c;
}

}  // namespace

TEST_CASE("adam closed form and trivial cases") {
    TrainConfig cfg;
    cfg.lr = 0.01;
    Params p = scalar_param(2.0f);
    OptimizerState s = OptimizerState::zeros_like(p);
    const std::vector<Tensor> one{Tensor::vector({1.0f})};
    adam_step(p, one, s, cfg);
    CHECK(s.step == 1);
    CHECK(p.at("x").data[0] == doctest::Approx(2.0 - 0.01 / (1.0 + 1e-8)).epsilon(1e-7));

    Params z = scalar_param(2.0f);
    OptimizerState zs = OptimizerState::zeros_like(z);
    adam_step(z, std::vector<Tensor>{Tensor::vector({0.0f})}, zs, cfg);
    CHECK(z.at("x").data[0] == 2.0f);

    TrainConfig still = cfg;
    still.lr = 0.0;
    Params q = scalar_param(2.0f);
    OptimizerState qs = OptimizerState::zeros_like(q);
    adam_step(q, one, qs, still);
    CHECK(q.at("x").data[0] == 2.0f);

    Params f = scalar_param(2.0f);
    f.frozen = true;
    OptimizerState fs = OptimizerState::zeros_like(f);
    adam_step(f, one, fs, cfg);
    CHECK(f.at("x").data[0] == 2.0f);

    Params n = scalar_param(2.0f);
    OptimizerState ns = OptimizerState::zeros_like(n);
    CHECK_THROWS_AS(adam_step(n, std::vector<Tensor>{Tensor::vector({std::nanf("")})}, ns, cfg), NumericError);
    CHECK_THROWS_AS(adam_step(n, std::vector<Tensor>{Tensor::vector({1, 2})}, ns, cfg), DimensionError);
}

TEST_CASE("global norm clipping") {
    std::vector<Tensor> g{Tensor::vector({3.0f}), Tensor::vector({4.0f})};
    CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(g[0].data[0] == doctest::Approx(0.6));
    CHECK(g[1].data[0] == doctest::Approx(0.8));
    std::vector<Tensor> small{Tensor::vector({0.3f})};
    clip_global_norm(small, 1.0);
    CHECK(small[0].data[0] == 0.3f);
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = {};
    c.beta1 = 1.0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    CHECK(parse_regime("instruction-tune") == Regime::instruction_tuned);
    CHECK_THROWS_AS(parse_regime("tuned"), ContractError);
}

TEST_CASE("serial and parallel batch gradients agree bitwise") {
    Processor proc = init_processor(testutil::tiny_processor(), 1);
    const auto data = small_split(12, 3);
    const auto batch = pointers(data);
    for (Regime r : {Regime::ablated, Regime::instruction_tuned}) {
        const BatchGradients s = baseline_batch_gradients(proc, batch, r, Execution::serial);
        const BatchGradients p = baseline_batch_gradients(proc, batch, r, Execution::parallel);
        CHECK(grads_bitwise_equal(s, p));
    }
    proc.params.frozen = true;
    const Editor e = init_editor(testutil::tiny_editor(), 16, true, 2);
    EditSpec spec;
    spec.mode = EditMode::replace;
    spec.lambda_l1 = 0.01;
    const BatchGradients s = editor_batch_gradients(proc, e, batch, spec, Execution::serial);
    const BatchGradients p = editor_batch_gradients(proc, e, batch, spec, Execution::parallel);
    CHECK(grads_bitwise_equal(s, p));
}

TEST_CASE("editor loss adds the weighted L1 term only when lambda > 0") {
    Processor proc = init_processor(testutil::tiny_processor(), 1);
    proc.params.frozen = true;
    const Editor e = init_editor(testutil::tiny_editor(), 16, false, 2);
    const auto data = small_split(6, 4);
    const auto batch = pointers(data);
    EditSpec spec;
    const BatchGradients plain = editor_batch_gradients(proc, e, batch, spec);
    CHECK(plain.loss == plain.ce);
    CHECK(plain.l1_mean > 0.0);
    spec.lambda_l1 = 0.5;
    const BatchGradients reg = editor_batch_gradients(proc, e, batch, spec);
    CHECK(reg.ce == plain.ce);
    CHECK(reg.loss == doctest::Approx(plain.ce + 0.5 * plain.l1_mean).epsilon(1e-6));
}

TEST_CASE("ablated training never reads the instruction") {
    Processor proc = init_processor(testutil::tiny_processor(), 1);
    auto data = small_split(8, 5);
    auto scrambled = data;
    // Ids outside the vocabulary: any embedding lookup of them would throw.
    for (auto& inst : scrambled) inst.instruction.assign(inst.instruction.size(), 100000);
    const BatchGradients a = baseline_batch_gradients(proc, pointers(data), Regime::ablated);
    const BatchGradients b = baseline_batch_gradients(proc, pointers(scrambled), Regime::ablated);
    CHECK(grads_bitwise_equal(a, b));
    CHECK_THROWS(baseline_batch_gradients(proc, pointers(scrambled), Regime::instruction_tuned));

    Processor p1 = init_processor(testutil::tiny_processor(), 1), p2 = p1;
    const TrainConfig cfg = short_run(4);
    const std::vector<Instance> none;
    train_baseline(p1, data, none, Regime::ablated, cfg);
    train_baseline(p2, scrambled, none, Regime::ablated, cfg);
    CHECK(p1.params.bitwise_equal(p2.params));
}

TEST_CASE("editor training leaves the processor bitwise unchanged") {
    Processor proc = init_processor(testutil::tiny_processor(), 1);
    proc.params.frozen = true;
    const Params before = proc.params;
    Editor e = init_editor(testutil::tiny_editor(), 16, false, 2);
    const Params editor_before = e.params;
    const auto data = small_split(16, 6);
    EditSpec mid;
    mid.layer = 1;  // an edit after the last block never reaches a predicted position
    const TrainResult r = train_editor(proc, e, data, data, short_run(5), mid);
    CHECK(proc.params.bitwise_equal(before));
    CHECK_FALSE(e.params.bitwise_equal(editor_before));
    CHECK(r.optimizer.step == 5);

    Processor live = init_processor(testutil::tiny_processor(), 1);
    CHECK_THROWS_AS(train_editor(live, e, data, data, short_run(1), EditSpec{}), ContractError);
    CHECK_THROWS_AS(train_baseline(proc, data, data, Regime::ablated, short_run(1)), ContractError);
    CHECK_THROWS_AS(train_baseline(live, data, data, Regime::editor, short_run(1)), ContractError);
}

TEST_CASE("training is deterministic and logs on schedule") {
    const auto data = small_split(16, 7);
    auto run = [&] {
        Processor proc = init_processor(testutil::tiny_processor(), 1);
        proc.params.frozen = true;
        Editor e = init_editor(testutil::tiny_editor(), 16, false, 2);
        EditSpec spec;
        spec.lambda_l1 = 1e-3;
        std::vector<std::size_t> checkpoints;
        TrainHooks hooks;
        hooks.checkpoint_every = 2;
        hooks.on_checkpoint = [&](std::size_t step, const OptimizerState& s) {
            CHECK(s.step == step);
            checkpoints.push_back(step);
        };
        TrainResult r = train_editor(proc, e, data, data, short_run(5), spec, hooks);
        CHECK(checkpoints == std::vector<std::size_t>{2, 4});
        return std::pair{r, e.params};
    };
    const auto [r1, p1] = run();
    const auto [r2, p2] = run();
    CHECK(p1.bitwise_equal(p2));
    REQUIRE(r1.history.size() == r2.history.size());
    std::vector<std::size_t> steps;
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        steps.push_back(r1.history[i].step);
        CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
        CHECK(r1.history[i].l1_mean == r2.history[i].l1_mean);
        CHECK(r1.history[i].eval_ppl == r2.history[i].eval_ppl);
    }
    // log_every 2, eval_every 3, and always the final step.
    CHECK(steps == std::vector<std::size_t>{2, 3, 4, 5});
    CHECK(r1.history[1].eval_ppl.has_value());
    CHECK_FALSE(r1.history[0].eval_ppl.has_value());
    CHECK(r1.history.back().eval_ppl.has_value());
}

TEST_CASE("non-finite values abort training") {
    Processor proc = init_processor(testutil::tiny_processor(), 1);
    proc.params.at("ln_f.g").data[0] = std::numeric_limits<float>::infinity();
    proc.params.frozen = true;
    Editor e = init_editor(testutil::tiny_editor(), 16, false, 2);
    const auto data = small_split(8, 8);
    CHECK_THROWS_AS(train_editor(proc, e, data, data, short_run(2), EditSpec{}), NumericError);
}
