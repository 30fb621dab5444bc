#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "edlab/config.hpp"
#include "edlab/error.hpp"
#include "edlab/persist.hpp"
#include "helpers.hpp"

using namespace edlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("edlab_persist_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<char> read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

Checkpoint editor_checkpoint() {
    Checkpoint c;
    c.regime = Regime::editor;
    c.processor = init_processor(testutil::tiny_processor(), 3);
    c.processor.params.frozen = true;
    c.editor = init_editor(testutil::tiny_editor(), 16, true, 4);
    c.edit.layer = 1;
    c.edit.position = 2;
    c.edit.mode = EditMode::replace;
    c.edit.lambda_l1 = 1e-3;
    c.train.steps = 77;
    c.train.lr = 1.25e-4;
    c.optimizer = OptimizerState::zeros_like(c.editor->params);
    c.optimizer.step = 12;
    for (std::size_t i = 0; i < c.optimizer.m.size(); ++i) {
        c.optimizer.m[i] = testutil::random_tensor(c.optimizer.m[i].shape, 10 + i);
        c.optimizer.v[i] = testutil::random_tensor(c.optimizer.v[i].shape, 100 + i, 0.01f);
    }
    return c;
}

void check_same(const Checkpoint& a, const Checkpoint& b) {
    CHECK(a.regime == b.regime);
    CHECK(a.processor.config == b.processor.config);
    CHECK(a.processor.params.bitwise_equal(b.processor.params));
    CHECK(a.processor.params.frozen == b.processor.params.frozen);
    REQUIRE(a.editor.has_value() == b.editor.has_value());
    if (a.editor) {
        CHECK(a.editor->params.bitwise_equal(b.editor->params));
        CHECK(a.editor->out_width == b.editor->out_width);
        CHECK(a.editor->transform == b.editor->transform);
    }
    CHECK(a.edit == b.edit);
    CHECK(a.train == b.train);
    CHECK(a.optimizer.step == b.optimizer.step);
    REQUIRE(a.optimizer.m.size() == b.optimizer.m.size());
    for (std::size_t i = 0; i < a.optimizer.m.size(); ++i) {
        CHECK(std::memcmp(a.optimizer.m[i].data.data(), b.optimizer.m[i].data.data(), a.optimizer.m[i].size() * 4) == 0);
        CHECK(std::memcmp(a.optimizer.v[i].data.data(), b.optimizer.v[i].data.data(), a.optimizer.v[i].size() * 4) == 0);
    }
}

// Replace the JSON header, keeping payload and trailer.
void rewrite_header(const fs::path& p, const std::function<void(json&)>& edit) {
    auto b = read_bytes(p);
    std::uint64_t len = 0;
    std::memcpy(&len, b.data() + 8, 8);
    json h = json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    edit(h);
    const std::string text = h.dump();
    const std::uint64_t n = text.size();
    std::string out(b.begin(), b.begin() + 8);
    out.append(reinterpret_cast<const char*>(&n), 8);
    out += text;
    out.append(b.begin() + 16 + static_cast<std::ptrdiff_t>(len), b.end());
    write_bytes(p, {out.begin(), out.end()});
}

CheckpointError::Kind load_error(const fs::path& p) {
    try {
        load_checkpoint(p);
    } catch (const CheckpointError& e) {
        return e.kind;
    }
    FAIL("load succeeded");
    return CheckpointError::Kind::io;
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise") {
    TempDir dir;
    const Checkpoint c = editor_checkpoint();
    save_checkpoint(c, dir.path / "a.edlb");
    check_same(c, load_checkpoint(dir.path / "a.edlb"));

    Checkpoint base;
    base.regime = Regime::instruction_tuned;
    base.processor = init_processor(testutil::tiny_processor(), 9);
    save_checkpoint(base, dir.path / "b.edlb");
    const Checkpoint lb = load_checkpoint(dir.path / "b.edlb");
    check_same(base, lb);
    CHECK(lb.optimizer.m.empty());
}

TEST_CASE("saving twice yields identical bytes") {
    TempDir dir;
    const Checkpoint c = editor_checkpoint();
    save_checkpoint(c, dir.path / "a.edlb");
    save_checkpoint(load_checkpoint(dir.path / "a.edlb"), dir.path / "b.edlb");
    CHECK(read_bytes(dir.path / "a.edlb") == read_bytes(dir.path / "b.edlb"));
}

TEST_CASE("corrupted checkpoints are rejected with the right kind") {
    using K = CheckpointError::Kind;
    TempDir dir;
    const fs::path p = dir.path / "c.edlb";
    save_checkpoint(editor_checkpoint(), p);
    const auto good = read_bytes(p);

    SUBCASE("truncated") {
        write_bytes(p, {good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() / 2)});
        const K k = load_error(p);
        CHECK((k == K::truncated || k == K::crc));
        write_bytes(p, {good.begin(), good.begin() + 10});
        CHECK(load_error(p) == K::truncated);
    }
    SUBCASE("magic") {
        auto b = good;
        b[0] = 'X';
        write_bytes(p, b);
        CHECK(load_error(p) == K::magic);
    }
    SUBCASE("version") {
        auto b = good;
        b[4] = 2;
        write_bytes(p, b);
        CHECK(load_error(p) == K::version);
    }
    SUBCASE("payload bit flip") {
        auto b = good;
        b[b.size() - 40] ^= 0x10;
        write_bytes(p, b);
        CHECK(load_error(p) == K::crc);
    }
    SUBCASE("unknown manifest entry") {
        rewrite_header(p, [](json& h) { h["tensors"][0]["name"] = "processor/bogus"; });
        CHECK(load_error(p) == K::manifest);
    }
    SUBCASE("shape mismatch") {
        rewrite_header(p, [](json& h) { h["tensors"][0]["shape"] = {1, 2}; });
        CHECK(load_error(p) == K::manifest);
    }
    SUBCASE("missing tensor") {
        rewrite_header(p, [](json& h) { h["tensors"].erase(h["tensors"].size() - 1); });
        CHECK(load_error(p) == K::manifest);
    }
    SUBCASE("bad header") {
        rewrite_header(p, [](json& h) { h["regime"] = "nonsense"; });
        CHECK(load_error(p) == K::header);
    }
    SUBCASE("missing file") { CHECK(load_error(dir.path / "nope.edlb") == K::io); }
}

TEST_CASE("crc32 matches the IEEE check value") {
    const char* s = "123456789";
    CHECK(crc32_of(s, 9) == 0xCBF43926u);
}

TEST_CASE("desk-scale checkpoint loads quickly") {
    TempDir dir;
    Checkpoint c;
    c.regime = Regime::ablated;
    c.processor = init_processor(ModelConfig::processor_default(), 0);
    c.optimizer = OptimizerState::zeros_like(c.processor.params);
    save_checkpoint(c, dir.path / "d.edlb");
    const auto t0 = std::chrono::steady_clock::now();
    const Checkpoint l = load_checkpoint(dir.path / "d.edlb");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(secs < 1.0);
    CHECK(l.processor.params.bitwise_equal(c.processor.params));
}
