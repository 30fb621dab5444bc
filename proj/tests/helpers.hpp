#pragma once

#include <random>

#include "doctest.h"
#include "edlab/data.hpp"
#include "edlab/model.hpp"

namespace testutil {

inline edlab::Tensor random_tensor(edlab::Shape shape, std::uint64_t seed, float sd = 1.0f) {
    edlab::Tensor t(std::move(shape));
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0.0f, sd);
    for (float& v : t.data) v = d(rng);
    return t;
}

// Small models that keep the tests fast.
inline edlab::ModelConfig tiny_processor() { return {edlab::tok::kVocabSize, 16, 2, 2, 32, 48}; }
inline edlab::ModelConfig tiny_editor() { return {edlab::tok::kVocabSize, 8, 1, 2, 16, 48}; }

inline edlab::Instance make_instance(edlab::Task t, const std::string& input, std::size_t template_index = 0) {
    return {edlab::tokenize(edlab::task_templates(t)[template_index]), edlab::tokenize(input),
            edlab::tokenize(edlab::apply_task(t, input)), t};
}

}  // namespace testutil
