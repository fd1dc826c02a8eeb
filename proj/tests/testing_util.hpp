/*
 * Copyright 2026 dalnet contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <functional>

namespace dal::testing {

/// Central finite difference of a scalar functional at one coordinate.
/// `poke` must set the coordinate and `eval` must recompute the scalar.
inline double central_diff(const std::function<void(double)>& poke,
                           const std::function<double()>& eval, double x0,
                           double step = 1e-4) {
    poke(x0 + step);
    const double hi = eval();
    poke(x0 - step);
    const double lo = eval();
    poke(x0);
    return (hi - lo) / (2.0 * step);
}

inline double rel_err(double got, double expect) {
    const double denom = std::max({std::abs(got), std::abs(expect), 1e-12});
    return std::abs(got - expect) / denom;
}

}  // namespace dal::testing
