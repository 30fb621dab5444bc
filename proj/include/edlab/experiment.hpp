#pragma once

// Run-directory plumbing shared by the CLI and the acceptance harness.

#include <filesystem>
#include <optional>
#include <string>

#include "edlab/config.hpp"
#include "edlab/eval.hpp"
#include "edlab/persist.hpp"

namespace edlab {

namespace fs = std::filesystem;

// Fixed artifact names inside a run directory.
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kMetricsFile = "metrics.jsonl";
inline constexpr const char* kCheckpointFile = "ckpt.edlb";
inline constexpr const char* kReportFile = "report.json";

// JSONL paths when configured, otherwise the synthetic task suite. Lines
// too long for the processor are skipped with a warning on stderr.
Dataset load_data(const DataConfig& config, std::size_t max_seq);
std::vector<Instance> load_split(const fs::path& path, std::size_t max_seq);

// The frozen processor for editor runs: config.processor_ckpt when set,
// otherwise a fresh initialization from train.seed.
Processor frozen_processor(const RunConfig& config);

// One metrics line with keys in fixed order: step, train_loss, eval_ppl, l1_mean.
std::string metrics_line(const MetricsRecord& r);

struct RunOutcome {
    Checkpoint checkpoint;
    TrainResult result;
    double eval_ppl = 0.0;
    std::optional<double> held_out_ppl;
};

// Trains one regime end to end and writes config.json, metrics.jsonl,
// ckpt.edlb and report.json into `dir`. A checkpoint is also written every
// `checkpoint_every` steps so an aborted run keeps its last good state.
RunOutcome run_training(const RunConfig& config, Regime regime, const Dataset& data, const fs::path& dir,
                        std::size_t checkpoint_every = 500);

System system_of(const Checkpoint& ckpt);

json to_json(const PerplexityResult& r);
json to_json(const EvalReport& r);
json to_json(const SparsityReport& r);
// dim,mean_abs_delta rows for plotting.
std::string sparsity_csv(const SparsityReport& r);

}  // namespace edlab
