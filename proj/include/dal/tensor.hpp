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

#include <Eigen/Core>
#include <cassert>

namespace dal {

template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowMajorMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMajorArr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense CHW tensor; data[ch*h*w + y*w + x].
template <typename T>
struct Tensor {
    int c = 0, h = 0, w = 0;
    Eigen::Array<T, Eigen::Dynamic, 1> data;

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_) {
        data = Eigen::Array<T, Eigen::Dynamic, 1>::Zero(std::ptrdiff_t(c) * h * w);
    }

    std::ptrdiff_t size() const { return std::ptrdiff_t(c) * h * w; }
    std::ptrdiff_t plane() const { return std::ptrdiff_t(h) * w; }

    T& at(int ch, int y, int x) { return data[ch * plane() + std::ptrdiff_t(y) * w + x]; }
    T at(int ch, int y, int x) const { return data[ch * plane() + std::ptrdiff_t(y) * w + x]; }

    Eigen::Map<RowMajorArr<T>> channel(int ch) {
        return {data.data() + ch * plane(), h, w};
    }
    Eigen::Map<const RowMajorArr<T>> channel(int ch) const {
        return {data.data() + ch * plane(), h, w};
    }

    void set_zero() { data.setZero(); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(c, h, w);
        out.data = data.template cast<U>();
        return out;
    }
};

}  // namespace dal
