#include "doctest.h"
#include "edlab/error.hpp"
#include "edlab/eval.hpp"
#include "edlab/graph.hpp"
#include "edlab/intervene.hpp"
#include "helpers.hpp"

using namespace edlab;

TEST_CASE("apply_edit examples") {
    const Tensor states = Tensor::matrix(3, 2, {1, 1, 4, 5, -1, 2});
    EditSpec spec;
    spec.position = 1;
    const Tensor same = apply_edit(states, Tensor({2}), spec);
    CHECK(same.bitwise_equal(states));

    Tensor ones = states;
    ones.row(1)[0] = 1;
    ones.row(1)[1] = 1;
    const Tensor out = apply_edit(ones, Tensor::vector({0.5f, -1.0f}), spec);
    CHECK(out.at(1, 0) == 1.5f);
    CHECK(out.at(1, 1) == 0.0f);
    CHECK(out.at(0, 0) == 1.0f);
    CHECK(out.at(2, 1) == 2.0f);

    spec.mode = EditMode::replace;
    const Tensor kept = apply_edit(states, Tensor::vector({4, 5}), spec);
    CHECK(kept.bitwise_equal(states));

    CHECK_THROWS_AS(apply_edit(states, Tensor({3}), spec), DimensionError);
    spec.position = 3;
    CHECK_THROWS_AS(apply_edit(states, Tensor({2}), spec), ContractError);
}

TEST_CASE("l1 penalty") {
    const Tensor h = Tensor::vector({1, -2, 0});
    CHECK(l1_penalty(h, h) == 0.0f);
    CHECK(l1_penalty(h, Tensor({3})) == 3.0f);
    const Tensor a = testutil::random_tensor({8}, 1), b = testutil::random_tensor({8}, 2);
    Tensor ca = a, cb = b;
    for (float& v : ca.data) v *= -2.5f;
    for (float& v : cb.data) v *= -2.5f;
    CHECK(l1_penalty(ca, cb) == doctest::Approx(2.5 * l1_penalty(a, b)).epsilon(1e-6));
    CHECK_THROWS_AS(l1_penalty(a, Tensor({7})), DimensionError);
}

TEST_CASE("edit spec validation") {
    const ModelConfig c = testutil::tiny_processor();
    EditSpec s;
    s.layer = c.n_layers;
    CHECK_NOTHROW(s.validate(c));
    s.layer = c.n_layers + 1;
    CHECK_THROWS_AS(s.validate(c), ContractError);
    s = {};
    s.lambda_l1 = -1.0;
    CHECK_THROWS_AS(s.validate(c), ContractError);
    CHECK(parse_edit_mode("replace") == EditMode::replace);
    CHECK_THROWS_AS(parse_edit_mode("swap"), ContractError);
}

namespace {

struct Fixture {
    Processor processor = init_processor(testutil::tiny_processor(), 1);
    Instance inst = testutil::make_instance(Task::reverse, "abcdef");
    std::vector<Token> seq;
    Fixture() {
        processor.params.frozen = true;
        const Sequence s = layout_processor(inst.input, inst.target, processor.config.max_seq);
        seq.assign(s.inputs().begin(), s.inputs().end());
    }
};

}  // namespace

TEST_CASE("zero-projection editor leaves the processor output bitwise unchanged") {
    Fixture f;
    Editor e = init_editor(testutil::tiny_editor(), f.processor.config.d_model, false, 2);
    e.params.at("proj") = Tensor(e.params.at("proj").shape);
    const ProcessorOutput plain = processor_forward(f.processor, f.seq);
    for (std::size_t layer = 0; layer <= f.processor.config.n_layers; ++layer) {
        EditSpec spec;
        spec.layer = layer;
        const EditedOutput out = edited_forward(f.processor, e, f.inst.instruction, f.seq, spec);
        CAPTURE(layer);
        CHECK(out.logits.bitwise_equal(plain.logits));
        for (std::size_t l = 0; l < plain.states.layers.size(); ++l)
            CHECK(out.states.layers[l].bitwise_equal(plain.states.layers[l]));
    }
}

TEST_CASE("edits are local for both modes, every layer and position") {
    Fixture f;
    const ProcessorOutput plain = processor_forward(f.processor, f.seq);
    for (bool replace : {false, true}) {
        const Editor e = init_editor(testutil::tiny_editor(), f.processor.config.d_model, replace, 3);
        for (std::size_t layer = 0; layer <= f.processor.config.n_layers; ++layer) {
            for (std::size_t pos : {std::size_t{0}, f.seq.size() - 1}) {
                EditSpec spec;
                spec.layer = layer;
                spec.position = pos;
                spec.mode = replace ? EditMode::replace : EditMode::add;
                const EditedOutput out = edited_forward(f.processor, e, f.inst.instruction, f.seq, spec);
                const LocalityDiff d = locality_check(out.states, plain.states, spec);
                CAPTURE(layer);
                CAPTURE(pos);
                CHECK(d.ok);
                // The edit itself changed something at the site.
                const auto a = out.states.layers[layer].row(pos), b = plain.states.layers[layer].row(pos);
                CHECK_FALSE(std::equal(a.begin(), a.end(), b.begin()));
            }
        }
    }
}

TEST_CASE("locality check reports the corrupted layer") {
    Fixture f;
    const Editor e = init_editor(testutil::tiny_editor(), f.processor.config.d_model, false, 3);
    EditSpec spec;
    spec.layer = 2;
    const ProcessorOutput plain = processor_forward(f.processor, f.seq);
    EditedOutput out = edited_forward(f.processor, e, f.inst.instruction, f.seq, spec);
    out.states.layers[1].data[5] += 1.0f;
    LocalityDiff d = locality_check(out.states, plain.states, spec);
    CHECK_FALSE(d.ok);
    REQUIRE(d.layer);
    CHECK(*d.layer == 1);

    out = edited_forward(f.processor, e, f.inst.instruction, f.seq, spec);
    out.states.layers[2].row(3)[0] += 1.0f;
    d = locality_check(out.states, plain.states, spec);
    CHECK_FALSE(d.ok);
    CHECK(*d.layer == 2);
    CHECK(*d.row == 3);
}

TEST_CASE("add-mode delta is exactly the editor output") {
    Fixture f;
    const Editor e = init_editor(testutil::tiny_editor(), f.processor.config.d_model, false, 3);
    const EditedOutput out = edited_forward(f.processor, e, f.inst.instruction, f.seq, EditSpec{});
    CHECK(out.delta.bitwise_equal(editor_encode(e, f.inst.instruction)));
}

TEST_CASE("edited forward argument checks") {
    Fixture f;
    const Editor narrow = init_editor(testutil::tiny_editor(), 8, false, 3);
    CHECK_THROWS_AS(edited_forward(f.processor, narrow, f.inst.instruction, f.seq, EditSpec{}), DimensionError);
    const Editor plain = init_editor(testutil::tiny_editor(), f.processor.config.d_model, false, 3);
    EditSpec replace;
    replace.mode = EditMode::replace;
    CHECK_THROWS_AS(edited_forward(f.processor, plain, f.inst.instruction, f.seq, replace), ContractError);
    EditSpec far;
    far.position = f.seq.size();
    CHECK_THROWS_AS(edited_forward(f.processor, plain, f.inst.instruction, f.seq, far), ContractError);
    CHECK_THROWS_AS(edited_forward(f.processor, plain, std::vector<Token>{}, f.seq, EditSpec{}),
                    DegenerateInputError);
}
