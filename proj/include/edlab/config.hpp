#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "edlab/data.hpp"
#include "edlab/intervene.hpp"
#include "edlab/model.hpp"
#include "edlab/train.hpp"

namespace edlab {

using json = nlohmann::json;

struct DataConfig {
    std::string train;     // JSONL paths; empty = generate synthetic data
    std::string eval;
    std::string held_out;
    std::size_t n_train = 20000;
    std::size_t n_eval = 2000;
    std::size_t n_held_out = 2000;
    std::uint64_t seed = 0;
    std::vector<Task> tasks{std::begin(kAllTasks), std::end(kAllTasks)};
    std::size_t min_len = 3;
    std::size_t max_len = 12;

    bool operator==(const DataConfig&) const = default;
};

// Everything a run needs; every field has a default, unknown keys are rejected.
struct RunConfig {
    ModelConfig processor = ModelConfig::processor_default();
    ModelConfig editor = ModelConfig::editor_default();
    TrainConfig train;
    EditSpec edit;
    DataConfig data;
    // Frozen processor for editor runs (a trained ablated checkpoint).
    // Empty means a freshly initialized processor from train.seed.
    std::string processor_ckpt;

    // Throws ConfigError.
    void validate() const;
    bool operator==(const RunConfig&) const = default;
};

json to_json(const ModelConfig& c);
json to_json(const TrainConfig& c);
json to_json(const EditSpec& c);
json to_json(const DataConfig& c);
json to_json(const RunConfig& c);

// Strict readers: missing keys keep their defaults, unknown keys and type
// mismatches raise ConfigError naming the offending path.
ModelConfig model_config_from_json(const json& j, const std::string& where = "model");
TrainConfig train_config_from_json(const json& j, const std::string& where = "train");
EditSpec edit_spec_from_json(const json& j, const std::string& where = "edit");
DataConfig data_config_from_json(const json& j, const std::string& where = "data");
RunConfig run_config_from_json(const json& j);

RunConfig load_run_config(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& j);

}  // namespace edlab
