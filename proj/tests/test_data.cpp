#include <map>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "edlab/error.hpp"
#include "edlab/data.hpp"
#include "helpers.hpp"

using namespace edlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& content) {
    const fs::path dir = fs::temp_directory_path() / "edlab_test_data";
    fs::create_directories(dir);
    const fs::path p = dir / name;
    std::ofstream(p, std::ios::binary) << content;
    return p;
}

std::string key(const Instance& i) { return detokenize(i.instruction) + "|" + detokenize(i.input); }

}  // namespace

TEST_CASE("byte tokenizer") {
    CHECK(tokenize("ab") == std::vector<Token>{97, 98});
    CHECK(tokenize("").empty());
    CHECK_THROWS_AS(detokenize(std::vector<Token>{tok::kBos}), ContractError);

    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> byte(0, 255);
    for (int rep = 0; rep < 50; ++rep) {
        std::string s(rep, '\0');
        for (char& c : s) c = static_cast<char>(byte(rng));
        CHECK(detokenize(tokenize(s)) == s);
    }
}

TEST_CASE("task functions") {
    CHECK(apply_task(Task::reverse, "abc") == "cba");
    CHECK(apply_task(Task::copy, "hello") == "hello");
    CHECK(apply_task(Task::shift1, "az") == "ba");
    CHECK(apply_task(Task::shift2, "yz") == "ab");
    CHECK(apply_task(Task::upper, "abc") == "ABC");
    CHECK(apply_task(Task::dup_first, "abc") == "aabc");
    for (Task t : kAllTasks) {
        CHECK(parse_task(task_name(t)) == t);
        for (auto tpl : task_templates(t)) CHECK(task_of_instruction(tpl) == t);
    }
    CHECK_THROWS_AS(parse_task("sort"), ContractError);
    CHECK(parse_task_list("copy,upper") == std::vector<Task>{Task::copy, Task::upper});
    CHECK_FALSE(task_of_instruction("Do something."));
}

TEST_CASE("sequence layouts") {
    const std::vector<Token> a{97}, b{98}, none;
    const Sequence s = layout_processor(a, b, 64);
    CHECK(s.tokens == std::vector<Token>{256, 97, 257, 98, 258});
    // Positions 2 and 3 predict 98 and EOS.
    CHECK(s.loss_mask == Mask{0, 0, 1, 1, 0});
    CHECK(std::vector<Token>(s.inputs().begin(), s.inputs().end()) == std::vector<Token>{256, 97, 257, 98});
    CHECK(std::vector<Token>(s.targets().begin(), s.targets().end()) == std::vector<Token>{97, 257, 98, 258});

    const Sequence e = layout_processor(none, b, 64);
    CHECK(e.tokens[0] == tok::kBos);
    CHECK(e.tokens[1] == tok::kSep);

    const std::vector<Token> y = tokenize("xyz");
    const Sequence it = layout_instruction_tuned(tokenize("Do."), a, y, 64);
    CHECK(it.tokens.size() == 1 + 3 + 1 + 1 + 1 + 3 + 1);
    std::size_t masked = 0;
    for (auto m : it.loss_mask) masked += m;
    CHECK(masked == y.size() + 1);

    CHECK_THROWS_AS(layout_processor(a, none, 64), ContractError);
    CHECK_THROWS_AS(layout_processor(tokenize("abcdef"), b, 6), ContractError);
}

TEST_CASE("synthetic dataset generation") {
    const Dataset a = gen_dataset(kAllTasks, 600, 7);
    const Dataset b = gen_dataset(kAllTasks, 600, 7);
    const Dataset c = gen_dataset(kAllTasks, 600, 8);
    REQUIRE(a.train.size() == 600);
    CHECK(a.eval.size() == 60);
    CHECK(a.held_out.size() == 60);
    for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(key(a.train[i]) == key(b.train[i]));
    CHECK(key(a.train[0]) + key(a.train[1]) != key(c.train[0]) + key(c.train[1]));

    std::set<std::string> seen;
    std::set<std::string> train_instr;
    std::map<Task, int> counts;
    for (const auto* split : {&a.train, &a.eval, &a.held_out})
        for (const auto& i : *split) {
            CHECK(seen.insert(key(i)).second);
            REQUIRE(i.task);
            CHECK(detokenize(i.target) == apply_task(*i.task, detokenize(i.input)));
            CHECK(i.input.size() >= 3);
            CHECK(i.input.size() <= 12);
        }
    for (const auto& i : a.train) {
        train_instr.insert(detokenize(i.instruction));
        ++counts[*i.task];
    }
    for (const auto& [t, n] : counts) CHECK(n == 100);
    for (const auto& i : a.held_out) CHECK_FALSE(train_instr.contains(detokenize(i.instruction)));

    const Task one[] = {Task::upper};
    for (const auto& i : gen_dataset(one, 20, 1).train) CHECK(i.task == Task::upper);
    CHECK_THROWS_AS(gen_dataset(kAllTasks, 0, 1), ContractError);
}

TEST_CASE("alpaca JSONL loading") {
    const fs::path p = temp_file("ok.jsonl",
                                 "{\"instruction\":\"Reverse.\",\"input\":\"ab\",\"output\":\"ba\"}\n"
                                 "{\"instruction\":\"Say hi.\",\"output\":\"hi\"}\n"
                                 "\n"
                                 "{\"instruction\":\"copy input\",\"input\":\"\",\"output\":\"x\"}\n");
    const LoadResult r = load_alpaca_jsonl(p, 64);
    REQUIRE(r.instances.size() == 3);
    CHECK(r.skipped == 0);
    CHECK(r.instances[0].instruction == tokenize("Reverse."));
    CHECK(r.instances[0].input == tokenize("ab"));
    CHECK(r.instances[0].target == tokenize("ba"));
    CHECK(r.instances[1].input.empty());
    CHECK(r.instances[2].input.empty());
    CHECK(r.instances[2].task == Task::copy);

    const fs::path bad = temp_file("bad.jsonl",
                                   "{\"instruction\":\"a\",\"output\":\"b\"}\n"
                                   "{\"instruction\":\"a\",\"output\":\n");
    try {
        load_alpaca_jsonl(bad, 64);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line == 2);
    }
    CHECK_THROWS_AS(load_alpaca_jsonl(temp_file("missing.jsonl", "{\"input\":\"a\",\"output\":\"b\"}\n"), 64),
                    ParseError);
    CHECK_THROWS_AS(load_alpaca_jsonl(temp_file("type.jsonl", "{\"instruction\":1,\"output\":\"b\"}\n"), 64),
                    ParseError);

    const fs::path long_line = temp_file(
        "long.jsonl", "{\"instruction\":\"" + std::string(70, 'i') + "\",\"output\":\"b\"}\n"
                      "{\"instruction\":\"a\",\"output\":\"b\"}\n");
    const LoadResult skipped = load_alpaca_jsonl(long_line, 64);
    CHECK(skipped.instances.size() == 1);
    CHECK(skipped.skipped == 1);
}

TEST_CASE("JSONL round trip and hash split") {
    const Dataset d = gen_dataset(kAllTasks, 200, 2);
    const fs::path p = fs::temp_directory_path() / "edlab_test_data" / "rt.jsonl";
    fs::create_directories(p.parent_path());
    write_jsonl(p, d.train);
    const LoadResult back = load_alpaca_jsonl(p, 64);
    REQUIRE(back.instances.size() == d.train.size());
    for (std::size_t i = 0; i < d.train.size(); ++i) {
        CHECK(back.instances[i].instruction == d.train[i].instruction);
        CHECK(back.instances[i].input == d.train[i].input);
        CHECK(back.instances[i].target == d.train[i].target);
    }

    const Dataset s1 = split_by_hash(d.train), s2 = split_by_hash(d.train);
    CHECK(s1.train.size() + s1.eval.size() == d.train.size());
    CHECK(s1.eval.size() == s2.eval.size());
    CHECK(s1.eval.size() > 5);
    CHECK(s1.eval.size() < 40);
    CHECK(split_by_hash(d.train, 0.0).eval.empty());
    CHECK_THROWS_AS(split_by_hash(d.train, 1.5), ContractError);
}

TEST_CASE("templates share one width and are unique across tasks") {
    std::set<std::string_view> seen;
    for (Task t : kAllTasks)
        for (auto tpl : task_templates(t)) {
            CHECK(tpl.size() == kTemplateWidth);
            CHECK(seen.insert(tpl).second);
        }
}
