// edlab: data generation, training, evaluation and sweeps for
// instruction-conditioned hidden-state editing.
//
// Exit codes: 0 success, 1 usage, 2 validation (bad config, paths, inputs),
// 3 runtime (numeric failure, IO during a run, failed gradient check).

#include <omp.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"

#include "edlab/error.hpp"
#include "edlab/experiment.hpp"
#include "edlab/gradcheck.hpp"

using namespace edlab;

namespace {

constexpr int kUsage = 1, kValidation = 2, kRuntime = 3;

struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class T>
std::vector<T> parse_list(const std::string& s, const char* what) {
    std::vector<T> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        std::istringstream one(item);
        T v;
        if (!(one >> v) || !one.eof()) throw ConfigError(std::string("bad ") + what + " entry '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
    return out;
}

// Config file plus flag overrides; unset flags leave the config alone.
struct RunOptions {
    std::string config;
    std::optional<std::size_t> steps, batch_size, layer, position;
    std::optional<std::uint64_t> seed;
    std::optional<double> lr, lambda;
    std::optional<std::string> mode, processor_ckpt, train_data, eval_data, held_out_data;

    void add_to(CLI::App* app) {
        app->add_option("--config", config, "Run configuration JSON (defaults for every missing field)");
        app->add_option("--steps", steps, "Optimizer steps");
        app->add_option("--batch-size", batch_size, "Instances per step");
        app->add_option("--seed", seed, "Init/shuffle seed");
        app->add_option("--lr", lr, "Adam learning rate");
        app->add_option("--layer", layer, "Edit layer (0 = embeddings, i = after block i)");
        app->add_option("--position", position, "Edited token position");
        app->add_option("--mode", mode, "Edit mode: add|replace");
        app->add_option("--lambda", lambda, "L1 weight on the edit");
        app->add_option("--processor-ckpt", processor_ckpt, "Frozen processor for editor runs");
        app->add_option("--train-data", train_data, "Training JSONL");
        app->add_option("--eval-data", eval_data, "Eval JSONL");
        app->add_option("--held-out-data", held_out_data, "Held-out-instruction JSONL");
    }

    RunConfig resolve() const {
        RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
        if (steps) c.train.steps = *steps;
        if (batch_size) c.train.batch_size = *batch_size;
        if (seed) c.train.seed = *seed;
        if (lr) c.train.lr = *lr;
        if (layer) c.edit.layer = *layer;
        if (position) c.edit.position = *position;
        if (mode) {
            try {
                c.edit.mode = parse_edit_mode(*mode);
            } catch (const ContractError& e) {
                throw ConfigError(e.what());
            }
        }
        if (lambda) c.edit.lambda_l1 = *lambda;
        if (processor_ckpt) c.processor_ckpt = *processor_ckpt;
        if (train_data) c.data.train = *train_data;
        if (eval_data) c.data.eval = *eval_data;
        if (held_out_data) c.data.held_out = *held_out_data;
        c.validate();
        return c;
    }
};

fs::path checkpoint_path(const std::string& p) {
    fs::path path(p);
    return fs::is_directory(path) ? path / kCheckpointFile : path;
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write " + path.string());
    out << text;
}

// ---- gen-data --------------------------------------------------------------

struct GenData {
    std::string tasks = "all", out = "data";
    std::size_t n = 20000, n_eval = 0, n_held_out = 0, min_len = 3, max_len = 12;
    std::uint64_t seed = 0;

    int run() const {
        const std::vector<Task> list =
            tasks == "all" ? std::vector<Task>(std::begin(kAllTasks), std::end(kAllTasks)) : parse_task_list(tasks);
        const Dataset d = gen_dataset(list, n, seed, {n_eval, n_held_out, min_len, max_len});
        fs::create_directories(out);
        write_jsonl(fs::path(out) / "train.jsonl", d.train);
        write_jsonl(fs::path(out) / "eval.jsonl", d.eval);
        write_jsonl(fs::path(out) / "held_out.jsonl", d.held_out);
        std::cerr << "wrote " << d.train.size() << " train, " << d.eval.size() << " eval, " << d.held_out.size()
                  << " held-out instances to " << out << '\n';
        return 0;
    }
};

// ---- train -------------------------------------------------------------------

struct Train {
    RunOptions opts;
    std::string regime, out;
    std::size_t checkpoint_every = 500;

    int run() const {
        const Regime r = parse_regime(regime);
        const RunConfig c = opts.resolve();
        const Dataset data = load_data(c.data, c.processor.max_seq);
        RunOutcome o = run_training(c, r, data, out, checkpoint_every);
        std::cerr << to_string(r) << ": eval ppl " << o.eval_ppl;
        if (o.held_out_ppl) std::cerr << ", held-out ppl " << *o.held_out_ppl;
        std::cerr << '\n';
        return 0;
    }
};

// ---- eval --------------------------------------------------------------------

struct Eval {
    std::string ckpt, split, out, ablated_ckpt, it_ckpt;
    bool held_out = false;

    int run() const {
        const Checkpoint c = load_checkpoint(checkpoint_path(ckpt));
        const auto instances = load_split(split, c.processor.config.max_seq);
        if (instances.empty()) throw ConfigError("no usable instances in " + split);
        const PerplexityResult pr = evaluate_perplexity(system_of(c), instances);

        EvalReport report;
        report.split_ppl[held_out ? "held_out" : "eval"] = pr.perplexity;
        report.task_ppl = pr.per_task;
        if (!ablated_ckpt.empty() && !it_ckpt.empty()) {
            const Checkpoint a = load_checkpoint(checkpoint_path(ablated_ckpt));
            const Checkpoint i = load_checkpoint(checkpoint_path(it_ckpt));
            const double pa = evaluate_perplexity(system_of(a), instances).perplexity;
            const double pi = evaluate_perplexity(system_of(i), instances).perplexity;
            report.split_ppl["ablated"] = pa;
            report.split_ppl["instruction-tune"] = pi;
            try {
                report.gap_closed = gap_closed(pa, pr.perplexity, pi);
            } catch (const UndefinedMetricError& e) {
                std::cerr << "gap_closed undefined: " << e.what() << '\n';
            }
        }
        json j = to_json(report);
        j["regime"] = to_string(c.regime);
        j["tokens"] = pr.tokens;
        j["instances"] = pr.instances;
        print_json(j);
        const fs::path dir = out.empty() ? checkpoint_path(ckpt).parent_path() : fs::path(out);
        fs::create_directories(dir.empty() ? "." : dir);
        write_json_file((dir.empty() ? fs::path(".") : dir) / kReportFile, j);
        return 0;
    }
};

// ---- sweep-layers ------------------------------------------------------------

struct SweepLayers {
    RunOptions opts;
    std::string layers, out, ablated_ckpt, it_ckpt;

    int run() const {
        const RunConfig c = opts.resolve();
        const auto list = parse_list<std::size_t>(layers, "layer");
        const Dataset data = load_data(c.data, c.processor.max_seq);
        const Processor proc = frozen_processor(c);

        SweepInputs in;
        in.processor = &proc;
        in.editor_config = c.editor;
        in.train = data.train;
        in.eval = data.eval;
        in.held_out = data.held_out;
        in.train_config = c.train;
        in.edit = c.edit;
        if (!ablated_ckpt.empty())
            in.ppl_ablated = evaluate_perplexity(system_of(load_checkpoint(checkpoint_path(ablated_ckpt))), data.eval)
                                 .perplexity;
        if (!it_ckpt.empty())
            in.ppl_it =
                evaluate_perplexity(system_of(load_checkpoint(checkpoint_path(it_ckpt))), data.eval).perplexity;

        std::ofstream metrics;
        auto layer_dir = [&](std::size_t l) { return fs::path(out) / ("layer" + std::to_string(l)); };
        in.hooks_for = [&](std::size_t l, const Editor&) {
            RunConfig lc = c;
            lc.edit.layer = l;
            fs::create_directories(layer_dir(l));
            write_json_file(layer_dir(l) / kConfigFile, to_json(lc));
            metrics = std::ofstream(layer_dir(l) / kMetricsFile, std::ios::trunc);
            TrainHooks h;
            h.on_metrics = [&](const MetricsRecord& r) { metrics << metrics_line(r) << '\n' << std::flush; };
            return h;
        };
        in.on_trained = [&](std::size_t l, const Editor& e, const TrainResult& tr) {
            Checkpoint ck{Regime::editor, proc, e, c.edit, c.train, tr.optimizer};
            ck.edit.layer = l;
            save_checkpoint(ck, layer_dir(l) / kCheckpointFile);
            std::cerr << "layer " << l << " trained\n";
        };
        EvalReport report = layer_sweep(list, in);
        json j = to_json(report);
        print_json(j);
        write_json_file(fs::path(out) / kReportFile, j);
        return 0;
    }
};

// ---- sweep-lambda --------------------------------------------------------------

struct SweepLambda {
    RunOptions opts;
    std::string values = "0,1e-4,1e-3,1e-2", seeds = "0", out;
    std::optional<double> tau;

    int run() const {
        const RunConfig base = opts.resolve();
        const auto lambdas = parse_list<double>(values, "lambda");
        const auto seed_list = parse_list<std::uint64_t>(seeds, "seed");
        const Dataset data = load_data(base.data, base.processor.max_seq);

        json cells = json::array(), summary = json::array();
        std::optional<double> t = tau;
        for (double lambda : lambdas) {
            double l1 = 0.0, active = 0.0;
            for (std::uint64_t seed : seed_list) {
                RunConfig c = base;
                c.edit.lambda_l1 = lambda;
                c.train.seed = seed;
                std::ostringstream name;
                name << "lambda_" << lambda << "/seed_" << seed;
                const fs::path dir = fs::path(out) / name.str();
                const RunOutcome o = run_training(c, Regime::editor, data, dir);
                const System sys = system_of(o.checkpoint);
                // The unedited edit-site activations depend only on the
                // frozen processor, so one tau serves every cell.
                if (!t) t = default_tau(sys, data.eval);
                const SparsityReport sr = sparsity_report(sys, data.eval, *t);
                write_json_file(dir / "sparsity.json", to_json(sr));
                write_text(dir / "sparsity.csv", sparsity_csv(sr));
                cells.push_back({{"lambda", lambda},
                                 {"seed", seed},
                                 {"eval_ppl", o.eval_ppl},
                                 {"mean_l1", sr.mean_l1},
                                 {"active_fraction", sr.active_fraction}});
                l1 += sr.mean_l1;
                active += sr.active_fraction;
                std::cerr << "lambda " << lambda << " seed " << seed << ": mean L1 " << sr.mean_l1 << ", active "
                          << sr.active_fraction << '\n';
            }
            const double n = double(seed_list.size());
            summary.push_back({{"lambda", lambda}, {"mean_l1", l1 / n}, {"active_fraction", active / n}});
        }
        const json j{{"tau", *t}, {"cells", cells}, {"by_lambda", summary}};
        print_json(j);
        write_json_file(fs::path(out) / kReportFile, j);
        return 0;
    }
};

// ---- inspect -------------------------------------------------------------------

struct Inspect {
    std::string ckpt, split, csv;
    std::size_t instance = 0;
    std::optional<double> tau;

    int run() const {
        const Checkpoint c = load_checkpoint(checkpoint_path(ckpt));
        if (c.regime != Regime::editor) throw ConfigError("inspect needs an editor checkpoint");
        const auto instances = load_split(split, c.processor.config.max_seq);
        if (instance >= instances.size())
            throw ConfigError("instance " + std::to_string(instance) + " out of range (" +
                              std::to_string(instances.size()) + " usable instances)");
        const System sys = system_of(c);
        const double t = tau ? *tau : default_tau(sys, instances);
        if (!(t > 0.0)) throw ConfigError("tau must be > 0");

        const Instance& inst = instances[instance];
        const Sequence seq = layout_processor(inst.input, inst.target, c.processor.config.max_seq);
        const EditedOutput eo = edited_forward(c.processor, *c.editor, inst.instruction, seq.inputs(), c.edit);
        json delta = json::array(), active = json::array();
        double l1 = 0.0;
        std::ostringstream rows;
        rows.precision(9);
        rows << "dim,delta,abs_delta,active\n";
        for (std::size_t j = 0; j < eo.delta.size(); ++j) {
            const double v = eo.delta.data[j], a = std::fabs(v);
            delta.push_back(v);
            l1 += a;
            if (a > t) active.push_back(j);
            rows << j << ',' << v << ',' << a << ',' << (a > t ? 1 : 0) << '\n';
        }
        print_json({{"instance", instance},
                    {"instruction", detokenize(inst.instruction)},
                    {"input", detokenize(inst.input)},
                    {"target", detokenize(inst.target)},
                    {"edit", to_json(c.edit)},
                    {"tau", t},
                    {"l1", l1},
                    {"active_dims", active},
                    {"delta", delta}});
        if (!csv.empty()) write_text(csv, rows.str());
        return 0;
    }
};

// ---- gradcheck -----------------------------------------------------------------

struct GradCheck {
    GradCheckOptions opt;
    bool verbose = false;

    int run() const {
        std::map<std::string, double> worst;
        std::size_t failed = 0;
        run_gradcheck_suite(opt, [&](const GradCheckResult& r) {
            worst[r.name] = std::max(worst[r.name], r.rel_error);
            if (!r.pass) ++failed;
            if (verbose || !r.pass)
                std::cout << r.name << " seed " << r.seed << " rel_error " << r.rel_error << " coords " << r.coords
                          << (r.skipped ? " kink-skipped " + std::to_string(r.skipped) : std::string())
                          << (r.pass ? "" : " FAIL") << '\n';
        });
        for (const auto& [name, err] : worst)
            std::cout << name << " max_rel_error " << err << (err < opt.tolerance ? " ok" : " FAIL") << '\n';
        std::cout << (failed ? "gradcheck FAILED (" + std::to_string(failed) + " checks)" : std::string("gradcheck ok"))
                  << '\n';
        if (failed) throw RuntimeFailure("gradient check failed");
        return 0;
    }
};

void cap_threads() {
    if (const char* env = std::getenv("EDLAB_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || n < 1) throw ConfigError("EDLAB_THREADS must be a positive integer");
        omp_set_num_threads(static_cast<int>(std::min<long>(n, omp_get_max_threads())));
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Instruction-conditioned hidden-state editing on a frozen transformer"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    GenData gen;
    auto* g = app.add_subcommand("gen-data", "Write synthetic train/eval/held-out JSONL splits");
    g->add_option("--tasks", gen.tasks, "Comma-separated tasks or 'all'");
    g->add_option("--n", gen.n, "Training instances");
    g->add_option("--n-eval", gen.n_eval, "Eval instances (0 = n/10)");
    g->add_option("--n-held-out", gen.n_held_out, "Held-out-instruction instances (0 = n/10)");
    g->add_option("--min-len", gen.min_len, "Shortest input");
    g->add_option("--max-len", gen.max_len, "Longest input");
    g->add_option("--seed", gen.seed, "Generator seed");
    g->add_option("--out", gen.out, "Output directory");

    Train train;
    auto* t = app.add_subcommand("train", "Train one regime into a run directory");
    train.opts.add_to(t);
    t->add_option("--regime", train.regime, "editor|instruction-tune|ablated")->required();
    t->add_option("--out", train.out, "Run directory")->required();
    t->add_option("--checkpoint-every", train.checkpoint_every, "Steps between checkpoints (0 = only at the end)");

    Eval ev;
    auto* e = app.add_subcommand("eval", "Perplexity report for a checkpoint on a JSONL split");
    e->add_option("--ckpt", ev.ckpt, "Checkpoint file or run directory")->required();
    e->add_option("--split", ev.split, "JSONL split")->required();
    e->add_flag("--held-out", ev.held_out, "Label the split as held-out instructions");
    e->add_option("--ablated-ckpt", ev.ablated_ckpt, "Lower-bound checkpoint for gap_closed");
    e->add_option("--it-ckpt", ev.it_ckpt, "Upper-bound checkpoint for gap_closed");
    e->add_option("--out", ev.out, "Report directory (default: the checkpoint's directory)");

    SweepLayers sl;
    auto* s = app.add_subcommand("sweep-layers", "Train one editor per edit layer");
    sl.opts.add_to(s);
    s->add_option("--layers", sl.layers, "Comma-separated layers")->required();
    s->add_option("--ablated-ckpt", sl.ablated_ckpt, "Lower-bound checkpoint");
    s->add_option("--it-ckpt", sl.it_ckpt, "Upper-bound checkpoint");
    s->add_option("--out", sl.out, "Sweep directory")->required();

    SweepLambda sw;
    auto* w = app.add_subcommand("sweep-lambda", "Sparsity reports across L1 weights");
    sw.opts.add_to(w);
    w->add_option("--values", sw.values, "Comma-separated L1 weights");
    w->add_option("--seeds", sw.seeds, "Comma-separated seeds per weight");
    w->add_option("--tau", sw.tau, "Activity threshold (default: 1% of edit-site RMS)");
    w->add_option("--out", sw.out, "Sweep directory")->required();

    Inspect in;
    auto* i = app.add_subcommand("inspect", "Per-dimension edit dump for one instance");
    i->add_option("--ckpt", in.ckpt, "Editor checkpoint file or run directory")->required();
    i->add_option("--split", in.split, "JSONL split")->required();
    i->add_option("--instance", in.instance, "Instance index in the split");
    i->add_option("--tau", in.tau, "Activity threshold (default: 1% of edit-site RMS on the split)");
    i->add_option("--csv", in.csv, "Also write dim,delta,abs_delta,active rows here");

    GradCheck gc;
    auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    c->add_option("--seeds", gc.opt.seeds, "Random seeds");
    c->add_option("--eps", gc.opt.eps, "Central-difference step");
    c->add_option("--tolerance", gc.opt.tolerance, "Max relative error");
    c->add_flag("--verbose", gc.verbose, "One line per check");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? 0 : kUsage;
    }

    try {
        cap_threads();
        if (*g) return gen.run();
        if (*t) return train.run();
        if (*e) return ev.run();
        if (*s) return sl.run();
        if (*w) return sw.run();
        if (*i) return in.run();
        if (*c) return gc.run();
    } catch (const RuntimeFailure& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kRuntime;
    } catch (const NumericError& err) {
        std::cerr << "numeric error: " << err.what() << '\n';
        return kRuntime;
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << '\n';
        return kValidation;
    } catch (const CheckpointError& err) {
        std::cerr << "checkpoint error: " << err.what() << '\n';
        return kValidation;
    } catch (const edlab::ParseError& err) {
        std::cerr << "parse error: " << err.what() << '\n';
        return kValidation;
    } catch (const ContractError& err) {
        std::cerr << "invalid argument: " << err.what() << '\n';
        return kValidation;
    } catch (const DimensionError& err) {
        std::cerr << "invalid argument: " << err.what() << '\n';
        return kValidation;
    } catch (const DegenerateInputError& err) {
        std::cerr << "invalid input: " << err.what() << '\n';
        return kValidation;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kRuntime;
    }
    return kUsage;
}
