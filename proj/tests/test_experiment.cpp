#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "edlab/error.hpp"
#include "edlab/experiment.hpp"
#include "helpers.hpp"

using namespace edlab;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("edlab_exp_" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

RunConfig small_run() {
    RunConfig c;
    c.processor = testutil::tiny_processor();
    c.editor = testutil::tiny_editor();
    c.train.steps = 6;
    c.train.batch_size = 4;
    c.train.log_every = 2;
    c.train.eval_every = 3;
    c.train.eval_limit = 20;
    c.data.n_train = 60;
    c.data.n_eval = 20;
    c.data.n_held_out = 10;
    return c;
}

}  // namespace

TEST_CASE("metrics lines have a fixed key order") {
    CHECK(metrics_line({4, 1.5, std::nullopt, 0.25}) ==
          R"({"step":4,"train_loss":1.5,"eval_ppl":null,"l1_mean":0.25})");
    CHECK(metrics_line({6, 2.0, 3.5, 0.0}) == R"({"step":6,"train_loss":2.0,"eval_ppl":3.5,"l1_mean":0.0})");
}

TEST_CASE("run_training writes a complete run directory") {
    TempDir dir;
    const RunConfig cfg = small_run();
    const Dataset data = load_data(cfg.data, cfg.processor.max_seq);
    const RunOutcome out = run_training(cfg, Regime::ablated, data, dir.path / "ablated", 4);
    for (const char* f : {kConfigFile, kMetricsFile, kCheckpointFile, kReportFile})
        CHECK(fs::exists(dir.path / "ablated" / f));
    CHECK_FALSE(fs::exists(dir.path / "ablated" / "ckpt.edlb.tmp"));
    CHECK(run_config_from_json(json::parse(slurp(dir.path / "ablated" / kConfigFile))) == cfg);

    const json report = json::parse(slurp(dir.path / "ablated" / kReportFile));
    CHECK(report["regime"] == "ablated");
    CHECK(report["split_ppl"]["eval"].get<double>() == out.eval_ppl);
    CHECK(report["split_ppl"].contains("held_out"));

    const Checkpoint ck = load_checkpoint(dir.path / "ablated" / kCheckpointFile);
    CHECK(ck.processor.params.bitwise_equal(out.checkpoint.processor.params));
    CHECK(ck.optimizer.step == 6);

    // Editor run against the saved ablated processor leaves it untouched.
    RunConfig ecfg = cfg;
    ecfg.processor_ckpt = (dir.path / "ablated" / kCheckpointFile).string();
    const RunOutcome ed = run_training(ecfg, Regime::editor, data, dir.path / "editor");
    CHECK(ed.checkpoint.processor.params.bitwise_equal(ck.processor.params));
    CHECK(ed.checkpoint.editor.has_value());

    RunConfig mismatched = ecfg;
    mismatched.processor.n_layers = 1;
    mismatched.edit.layer = 1;
    CHECK_THROWS_AS(run_training(mismatched, Regime::editor, data, dir.path / "bad"), ConfigError);
}

TEST_CASE("identical config and seed reproduce metrics byte for byte") {
    TempDir dir;
    const RunConfig cfg = small_run();
    const Dataset data = load_data(cfg.data, cfg.processor.max_seq);
    run_training(cfg, Regime::editor, data, dir.path / "a");
    run_training(cfg, Regime::editor, data, dir.path / "b");
    const std::string a = slurp(dir.path / "a" / kMetricsFile);
    CHECK_FALSE(a.empty());
    CHECK(a == slurp(dir.path / "b" / kMetricsFile));
    std::istringstream lines(a);
    std::string line;
    std::vector<std::size_t> steps;
    while (std::getline(lines, line)) steps.push_back(json::parse(line)["step"].get<std::size_t>());
    CHECK(steps == std::vector<std::size_t>{2, 3, 4, 6});
}

TEST_CASE("load_data from JSONL") {
    TempDir dir;
    const Dataset d = gen_dataset(kAllTasks, 50, 5);
    write_jsonl(dir.path / "all.jsonl", d.train);
    DataConfig c;
    c.train = (dir.path / "all.jsonl").string();
    const Dataset split = load_data(c, 256);
    CHECK(split.train.size() + split.eval.size() == 50);
    CHECK_FALSE(split.eval.empty());
    CHECK(split.held_out.empty());

    c.eval = (dir.path / "missing.jsonl").string();
    CHECK_THROWS_AS(load_data(c, 256), ConfigError);
}

TEST_CASE("sparsity csv layout") {
    SparsityReport r;
    r.mean_abs_delta = {0.5, 0.0};
    CHECK(sparsity_csv(r) == "dim,mean_abs_delta\n0,0.5\n1,0\n");
}
