#pragma once

// Plain-loop double-precision forward of the edited transformer. It shares
// no code with the graph path and serves as the finite-difference oracle
// for end-to-end gradient checks.

#include <span>
#include <vector>

#include "edlab/intervene.hpp"
#include "edlab/model.hpp"

namespace edlab::reference {

// Parameter values in the same order as Params::tensors().
using Values = std::vector<std::vector<double>>;

Values to_double(const Params& params);

struct Loss {
    double ce = 0.0;  // mean over masked positions
    double l1 = 0.0;  // sum |h_edited - h|
    std::vector<signed char> delta_sign;  // sign of each h_edited - h coordinate
};

Loss edited_loss(const Processor& processor, const Values& processor_values, const Editor& editor,
                 const Values& editor_values, std::span<const Token> instruction, std::span<const Token> inputs,
                 std::span<const Token> targets, const Mask& mask, const EditSpec& spec);

}  // namespace edlab::reference
