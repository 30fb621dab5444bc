// Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Run directories land in $EDLAB_ACCEPT_DIR
// (default ./acceptance_runs) and are kept for inspection.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "edlab/experiment.hpp"
#include "edlab/gradcheck.hpp"

using namespace edlab;

namespace {

// Learning rate for every desk run. The instruction-tuned baseline needs the
// larger step to get past its early plateau within 3000 steps.
constexpr double kDeskLr = 1e-3;
constexpr std::size_t kDefaultLayer = 0;
constexpr double kLambdas[] = {0.0, 1e-4, 1e-3, 1e-2};
constexpr std::uint64_t kSweepSeeds[] = {0, 1, 2};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
}

void note(const char* fmt, auto... args) {
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

RunConfig desk_config() {
    RunConfig c;  // processor d=64/L=4, editor d=32/L=2, six tasks, 20k/2k, 3000 steps, seed 0
    c.train.lr = kDeskLr;
    c.edit.layer = kDefaultLayer;
    return c;
}

std::uint64_t fnv1a(const Params& p) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&](const void* data, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ull;
    };
    for (const auto& t : p.tensors()) {
        mix(t.name.data(), t.name.size());
        mix(t.value.data.data(), t.value.size() * sizeof(float));
    }
    return h;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

RunOutcome timed_run(const RunConfig& cfg, Regime regime, const Dataset& data, const fs::path& dir) {
    const auto t0 = Clock::now();
    note("training %s -> %s", to_string(regime).c_str(), dir.string().c_str());
    RunOutcome out = run_training(cfg, regime, data, dir);
    note("  eval ppl %.4f in %.0f s", out.eval_ppl, seconds_since(t0));
    return out;
}

// Per-position enumeration over the toy vocabulary, one prefix forward per
// scored token, normalized in long double.
double brute_force_ppl(const Processor& p, std::span<const Sequence> seqs) {
    long double nll = 0.0L;
    std::size_t n = 0;
    for (const auto& s : seqs) {
        for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
            if (!s.loss_mask[t]) continue;
            const std::vector<Token> prefix(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(t) + 1);
            const Tensor logits = processor_forward(p, prefix).logits;
            const auto last = logits.row(t);
            long double z = 0.0L;
            for (std::size_t v = 0; v < p.config.vocab_size; ++v) z += std::exp((long double)last[v]);
            nll -= (long double)last[std::size_t(s.tokens[t + 1])] - std::log(z);
            ++n;
        }
    }
    return double(std::exp(nll / n));
}

}  // namespace

int main() {
    if (const char* t = std::getenv("EDLAB_THREADS")) omp_set_num_threads(std::max(1, std::atoi(t)));
    const fs::path root = std::getenv("EDLAB_ACCEPT_DIR") ? fs::path(std::getenv("EDLAB_ACCEPT_DIR"))
                                                          : fs::path("acceptance_runs");
    fs::create_directories(root);
    const auto start = Clock::now();

    const RunConfig desk = desk_config();
    const Dataset data = load_data(desk.data, desk.processor.max_seq);
    note("data: %zu train / %zu eval / %zu held-out", data.train.size(), data.eval.size(), data.held_out.size());

    // 1. Bound ordering.
    const RunOutcome ablated = timed_run(desk, Regime::ablated, data, root / "ablated");
    const RunOutcome it = timed_run(desk, Regime::instruction_tuned, data, root / "instruction_tuned");
    RunConfig editor_cfg = desk;
    editor_cfg.processor_ckpt = (root / "ablated" / kCheckpointFile).string();
    const auto editor_dir = [&](std::size_t layer) { return root / ("editor_layer" + std::to_string(layer)); };
    const RunOutcome editor = timed_run(editor_cfg, Regime::editor, data, editor_dir(kDefaultLayer));
    {
        const double a = ablated.eval_ppl, e = editor.eval_ppl, i = it.eval_ppl;
        const bool ordered = i < e && e < a;
        const double gap = a > i ? gap_closed(a, e, i) : std::nan("");
        report(1, ordered && gap >= 0.25,
               fmt("ppl it=%.4f editor=%.4f ablated=%.4f gap_closed=%.4f (need it<editor<ablated, gap>=0.25)", i, e, a,
                   gap));
    }

    // 2. Layer sweep.
    {
        bool ok = true;
        std::string detail;
        for (std::size_t layer : {1, 2, 3}) {
            double ppl = editor.eval_ppl;
            if (layer != kDefaultLayer) {
                RunConfig c = editor_cfg;
                c.edit.layer = layer;
                ppl = timed_run(c, Regime::editor, data, editor_dir(layer)).eval_ppl;
            }
            ok = ok && it.eval_ppl < ppl && ppl < ablated.eval_ppl;
            detail += fmt("layer%zu=%.4f ", layer, ppl);
            if (ablated.eval_ppl > it.eval_ppl)
                detail += fmt("(gap %.3f) ", gap_closed(ablated.eval_ppl, ppl, it.eval_ppl));
        }
        report(2, ok, detail + fmt("bounds (%.4f, %.4f)", it.eval_ppl, ablated.eval_ppl));
    }

    // 3. Gradient correctness.
    {
        const auto t0 = Clock::now();
        GradCheckOptions opt;
        opt.seeds = 25;
        opt.tolerance = 1e-3;
        const auto results = run_gradcheck_suite(opt);
        const double secs = seconds_since(t0);
        double worst = 0.0;
        std::string worst_name;
        bool all = true;
        for (const auto& r : results) {
            all = all && r.pass;
            if (r.rel_error > worst) worst = r.rel_error, worst_name = r.name;
        }
        report(3, all && worst < 1e-3 && secs <= 300.0,
               fmt("%zu checks over 25 seeds, max rel error %.3g (%s), %.1f s", results.size(), worst,
                   worst_name.c_str(), secs));
    }

    // 4. Frozen processor.
    {
        const std::uint64_t before = fnv1a(frozen_processor(editor_cfg).params);
        const std::uint64_t after = fnv1a(editor.checkpoint.processor.params);
        const std::uint64_t saved = fnv1a(load_checkpoint(editor_dir(kDefaultLayer) / kCheckpointFile).processor.params);
        report(4, before == after && after == saved,
               fmt("processor hash before %016llx, after training %016llx, in editor checkpoint %016llx",
                   (unsigned long long)before, (unsigned long long)after, (unsigned long long)saved));
    }

    // 5. Zero-edit identity and locality on every eval instance.
    {
        const Processor& proc = editor.checkpoint.processor;
        const Editor& ed = *editor.checkpoint.editor;
        const EditSpec spec = editor.checkpoint.edit;
        std::size_t identity_fail = 0, locality_fail = 0;
        std::string first;
        for (const auto& inst : data.eval) {
            const Sequence seq = layout_processor(inst.input, inst.target, proc.config.max_seq);
            const ProcessorOutput plain = processor_forward(proc, seq.inputs());

            Graph g;
            BoundParams pp(g, proc.params);
            const EditedVars zero = edited_forward_with(pp, proc.config, seq.inputs(), spec, [](Var h) {
                return h.graph().input(Tensor(h.shape()));
            });
            bool same = zero.logits.value().bitwise_equal(plain.logits);
            for (std::size_t l = 0; l < plain.states.layers.size(); ++l)
                same = same && zero.states[l].value().bitwise_equal(plain.states.layers[l]);
            identity_fail += !same;

            const EditedOutput edited = edited_forward(proc, ed, inst.instruction, seq.inputs(), spec);
            const LocalityDiff d = locality_check(edited.states, plain.states, spec);
            if (!d.ok && first.empty()) first = d.detail;
            locality_fail += !d.ok;
        }
        report(5, identity_fail == 0 && locality_fail == 0,
               fmt("%zu eval instances: zero-edit mismatches %zu, locality violations %zu%s%s", data.eval.size(),
                   identity_fail, locality_fail, first.empty() ? "" : "; first: ", first.c_str()));
    }

    // 6. Perplexity oracle on a V=5 toy model.
    {
        Processor toy = init_processor({5, 8, 2, 2, 16, 4}, 7);
        std::mt19937_64 rng(11);
        std::normal_distribution<float> d(0.0f, 0.7f);
        for (auto& t : toy.params.tensors())
            if (!t.name.ends_with(".g")) for (float& v : t.value.data) v = d(rng);
        const std::vector<Sequence> seqs{{{0, 3, 1, 4}, {1, 1, 1, 0}}, {{2, 2, 0}, {0, 1, 0}}, {{1, 4, 3, 3}, {1, 0, 1, 0}}};
        const double fast = evaluate_perplexity(toy, seqs).perplexity;
        const double brute = brute_force_ppl(toy, seqs);
        report(6, std::fabs(fast - brute) < 1e-6,
               fmt("evaluate_perplexity %.12f vs enumeration %.12f (|diff| %.2e, need < 1e-6)", fast, brute,
                   std::fabs(fast - brute)));
    }

    // 7. L1 sparsity sweep.
    {
        const System base{Regime::editor, &editor.checkpoint.processor, &*editor.checkpoint.editor, editor_cfg.edit};
        const double tau = default_tau(base, data.eval);
        std::vector<double> l1(std::size(kLambdas), 0.0), active(std::size(kLambdas), 0.0);
        double slowest = 0.0;
        std::string detail;
        for (std::size_t li = 0; li < std::size(kLambdas); ++li) {
            for (std::uint64_t seed : kSweepSeeds) {
                RunConfig c = editor_cfg;
                c.edit.lambda_l1 = kLambdas[li];
                c.train.seed = seed;
                const auto t0 = Clock::now();
                std::optional<RunOutcome> fresh;
                const Checkpoint* ck = &editor.checkpoint;
                if (!(c == editor_cfg)) {  // the (0, seed 0) cell is the criterion-1 editor
                    fresh = timed_run(c, Regime::editor, data,
                                      root / "sweep" / fmt("lambda_%g", kLambdas[li]) / fmt("seed_%llu", (unsigned long long)seed));
                    ck = &fresh->checkpoint;
                }
                const SparsityReport sr = sparsity_report(system_of(*ck), data.eval, tau);
                slowest = std::max(slowest, seconds_since(t0));
                l1[li] += sr.mean_l1 / double(std::size(kSweepSeeds));
                active[li] += sr.active_fraction / double(std::size(kSweepSeeds));
            }
            detail += fmt("lambda=%g: L1 %.4f active %.4f; ", kLambdas[li], l1[li], active[li]);
        }
        bool monotone = true;
        for (std::size_t i = 1; i < l1.size(); ++i) monotone = monotone && l1[i] <= l1[i - 1];
        report(7, monotone && active.back() < active.front() && slowest <= 1200.0,
               detail + fmt("tau %.4g, slowest cell %.0f s", tau, slowest));
    }

    // 8. Determinism and persistence.
    {
        RunConfig small = editor_cfg;
        small.train.steps = 40;
        small.train.log_every = 10;
        small.train.eval_every = 20;
        small.train.eval_limit = 200;
        bool same_metrics = true;
        for (Regime r : {Regime::editor, Regime::ablated}) {
            const fs::path a = root / "determinism" / (to_string(r) + "_a"), b = root / "determinism" / (to_string(r) + "_b");
            run_training(small, r, data, a);
            run_training(small, r, data, b);
            same_metrics = same_metrics && slurp(a / kMetricsFile) == slurp(b / kMetricsFile) &&
                           !slurp(a / kMetricsFile).empty();
        }

        const fs::path saved = editor_dir(kDefaultLayer) / kCheckpointFile;
        const Checkpoint loaded = load_checkpoint(saved);
        bool round_trip = loaded.processor.params.bitwise_equal(editor.checkpoint.processor.params) &&
                          loaded.editor->params.bitwise_equal(editor.checkpoint.editor->params) &&
                          loaded.optimizer.step == editor.checkpoint.optimizer.step;
        for (std::size_t i = 0; round_trip && i < loaded.optimizer.m.size(); ++i)
            round_trip = loaded.optimizer.m[i].bitwise_equal(editor.checkpoint.optimizer.m[i]) &&
                         loaded.optimizer.v[i].bitwise_equal(editor.checkpoint.optimizer.v[i]);
        const fs::path resaved = root / "determinism" / "resaved.edlb";
        save_checkpoint(loaded, resaved);
        round_trip = round_trip && slurp(saved) == slurp(resaved);

        const bool held_out = editor.held_out_ppl && std::isfinite(*editor.held_out_ppl);
        report(8, same_metrics && round_trip && held_out,
               fmt("metrics identical %s, checkpoint round trip %s, held-out ppl it=%.4f editor=%.4f ablated=%.4f",
                   same_metrics ? "yes" : "no", round_trip ? "bitwise" : "MISMATCH", it.held_out_ppl.value_or(NAN),
                   editor.held_out_ppl.value_or(NAN), ablated.held_out_ppl.value_or(NAN)));
    }

    note("total %.0f s", seconds_since(start));
    return failures == 0 ? 0 : 1;
}
