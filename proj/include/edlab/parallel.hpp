#pragma once

#include <cstddef>
#include <exception>
#include <vector>

namespace edlab {

// OpenMP loop over [0, n) that carries exceptions out of the parallel
// region. If several iterations throw, the lowest index wins, so the error a
// caller sees does not depend on the thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& body) {
    std::vector<std::exception_ptr> errors(n);
    bool failed = false;
    const long count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic, 1) reduction(|| : failed)
    for (long i = 0; i < count; ++i) {
        try {
            body(static_cast<std::size_t>(i));
        } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
        }
    }
    if (failed)
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
}

}  // namespace edlab
