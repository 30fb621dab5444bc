#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "edlab/config.hpp"
#include "edlab/error.hpp"

using namespace edlab;

TEST_CASE("run config round trips through JSON") {
    RunConfig c;
    c.train.lr = 1e-3;
    c.train.steps = 17;
    c.edit.layer = 3;
    c.edit.mode = EditMode::replace;
    c.edit.lambda_l1 = 1e-2;
    c.data.tasks = {Task::copy, Task::upper};
    c.data.n_train = 50;
    c.processor_ckpt = "runs/ablated/ckpt.edlb";
    CHECK(run_config_from_json(to_json(c)) == c);
    CHECK(run_config_from_json(json::object()) == RunConfig{});
}

TEST_CASE("partial configs keep defaults") {
    const RunConfig c = run_config_from_json(json::parse(R"({"train": {"steps": 5}})"));
    CHECK(c.train.steps == 5);
    CHECK(c.train.lr == 3e-4);
    CHECK(c.processor == ModelConfig::processor_default());
}

TEST_CASE("config errors name the offending key") {
    auto message = [](const char* text) -> std::string {
        try {
            run_config_from_json(json::parse(text));
        } catch (const ConfigError& e) {
            return e.what();
        }
        return "";
    };
    CHECK(message(R"({"trian": {}})").find("trian") != std::string::npos);
    CHECK(message(R"({"train": {"lr": "fast"}})").find("train.lr") != std::string::npos);
    CHECK(message(R"({"train": {"steps": -1}})").find("train.steps") != std::string::npos);
    CHECK(message(R"({"edit": {"mode": "multiply"}})").find("edit.mode") != std::string::npos);
    CHECK(message(R"({"edit": {"layer": 9}})").find("edit") != std::string::npos);
    CHECK(message(R"({"train": {"lr": -1}})").find("train") != std::string::npos);
    CHECK(message(R"({"data": {"tasks": ["copy", "sing"]}})").find("data.tasks") != std::string::npos);
    CHECK(message(R"({"data": {"tasks": []}})").find("data.tasks") != std::string::npos);
    CHECK(message(R"({"processor": {"vocab_size": 100}})").find("vocab_size") != std::string::npos);
}

TEST_CASE("load_run_config reports unreadable files") {
    CHECK_THROWS_AS(load_run_config("/nonexistent/edlab.json"), ConfigError);
    const auto p = std::filesystem::temp_directory_path() / "edlab_bad_config.json";
    std::ofstream(p) << "{ not json";
    CHECK_THROWS_AS(load_run_config(p), ConfigError);
    std::filesystem::remove(p);
}
