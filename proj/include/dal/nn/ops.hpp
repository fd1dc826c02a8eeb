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
#include <utility>
#include <vector>

#include "dal/tensor.hpp"

// Layer primitives as paired forward/backward free functions. Backward
// passes recompute im2col buffers instead of caching them; only layer
// inputs need to be kept alive by the caller.

namespace dal::nn {

template <typename T>
int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

/// Unfold x into a (C*k*k) x (OH*OW) matrix, zero padding outside.
template <typename T>
MatX<T> im2col(const Tensor<T>& x, int k, int stride, int pad) {
    const int oh = conv_out_extent<T>(x.h, k, stride, pad);
    const int ow = conv_out_extent<T>(x.w, k, stride, pad);
    MatX<T> col = MatX<T>::Zero(std::ptrdiff_t(x.c) * k * k, std::ptrdiff_t(oh) * ow);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t col_idx = std::ptrdiff_t(oy) * ow + ox;
            T* dst = col.data() + col_idx * col.rows();
            for (int ch = 0; ch < x.c; ++ch) {
                const T* plane = x.data.data() + ch * x.plane();
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        *dst++ = (iy >= 0 && iy < x.h && ix >= 0 && ix < x.w)
                                     ? plane[std::ptrdiff_t(iy) * x.w + ix]
                                     : T(0);
                    }
                }
            }
        }
    }
    return col;
}

/// Fold a (C*k*k) x (OH*OW) gradient back onto the input grid (adds).
template <typename T>
void col2im_add(const MatX<T>& col, int k, int stride, int pad, Tensor<T>& dx) {
    const int oh = conv_out_extent<T>(dx.h, k, stride, pad);
    const int ow = conv_out_extent<T>(dx.w, k, stride, pad);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t col_idx = std::ptrdiff_t(oy) * ow + ox;
            const T* src = col.data() + col_idx * col.rows();
            for (int ch = 0; ch < dx.c; ++ch) {
                T* plane = dx.data.data() + ch * dx.plane();
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (iy >= 0 && iy < dx.h && ix >= 0 && ix < dx.w)
                            plane[std::ptrdiff_t(iy) * dx.w + ix] += *src;
                        ++src;
                    }
                }
            }
        }
    }
}

/// y = W (*) x + b with W laid out (out_c) x (in_c*k*k).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const MatX<T>& weight, const VecX<T>& bias, int k,
                 int stride, int pad) {
    const int oh = conv_out_extent<T>(x.h, k, stride, pad);
    const int ow = conv_out_extent<T>(x.w, k, stride, pad);
    const int out_c = static_cast<int>(weight.rows());
    Tensor<T> y(out_c, oh, ow);
    MatX<T> col = im2col(x, k, stride, pad);
    Eigen::Map<RowMajorMat<T>> y_mat(y.data.data(), out_c, col.cols());
    y_mat.noalias() = weight * col;
    y_mat.colwise() += bias;
    return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const MatX<T>& weight, int k, int stride, int pad,
                     const Tensor<T>& dy, MatX<T>& dweight, VecX<T>& dbias,
                     Tensor<T>* dx = nullptr) {
    MatX<T> col = im2col(x, k, stride, pad);
    Eigen::Map<const RowMajorMat<T>> dy_mat(dy.data.data(), dy.c, col.cols());
    dweight.noalias() += dy_mat * col.transpose();
    dbias.noalias() += dy_mat.rowwise().sum();
    if (dx) {
        MatX<T> dcol(col.rows(), col.cols());
        dcol.noalias() = weight.transpose() * dy_mat;
        col2im_add(dcol, k, stride, pad, *dx);
    }
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    Tensor<T> y(x.c, x.h, x.w);
    y.data = (x.data > T(0)).select(x.data, x.data * slope);
    return y;
}

template <typename T>
void leaky_relu_backward(const Tensor<T>& x, T slope, const Tensor<T>& dy, Tensor<T>& dx) {
    dx.data += (x.data > T(0)).select(dy.data, dy.data * slope);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> y(x.c, x.h, x.w);
    y.data = T(1) / (T(1) + (-x.data).exp());
    return y;
}

/// dx from the *output* of sigmoid: dy * y * (1 - y).
template <typename T>
void sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx) {
    dx.data += dy.data * y.data * (T(1) - y.data);
}

template <typename T>
VecX<T> linear(const VecX<T>& x, const MatX<T>& weight, const VecX<T>& bias) {
    return weight * x + bias;
}

template <typename T>
void linear_backward(const VecX<T>& x, const MatX<T>& weight, const VecX<T>& dy,
                     MatX<T>& dweight, VecX<T>& dbias, VecX<T>* dx = nullptr) {
    dweight.noalias() += dy * x.transpose();
    dbias.noalias() += dy;
    if (dx) dx->noalias() += weight.transpose() * dy;
}

inline std::pair<int, int> pool_region(int j, int in, int out) {
    int lo = (j * in) / out;
    int hi = ((j + 1) * in + out - 1) / out;  // ceil
    return {lo, hi};
}

/// Adaptive average pooling to (oh, ow); regions may overlap or repeat
/// when the output is larger than the input.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, int oh, int ow) {
    Tensor<T> y(x.c, oh, ow);
    for (int ch = 0; ch < x.c; ++ch) {
        auto in = x.channel(ch);
        auto out = y.channel(ch);
        for (int j = 0; j < oh; ++j) {
            auto [y0, y1] = pool_region(j, x.h, oh);
            for (int i = 0; i < ow; ++i) {
                auto [x0, x1] = pool_region(i, x.w, ow);
                out(j, i) = in.block(y0, x0, y1 - y0, x1 - x0).mean();
            }
        }
    }
    return y;
}

template <typename T>
void adaptive_avg_pool_backward(const Tensor<T>& x, int oh, int ow, const Tensor<T>& dy,
                                Tensor<T>& dx) {
    for (int ch = 0; ch < x.c; ++ch) {
        auto din = dx.channel(ch);
        auto dout = dy.channel(ch);
        for (int j = 0; j < oh; ++j) {
            auto [y0, y1] = pool_region(j, x.h, oh);
            for (int i = 0; i < ow; ++i) {
                auto [x0, x1] = pool_region(i, x.w, ow);
                const T share = dout(j, i) / (T(y1 - y0) * T(x1 - x0));
                din.block(y0, x0, y1 - y0, x1 - x0) += RowMajorArr<T>::Constant(
                    y1 - y0, x1 - x0, share);
            }
        }
    }
}

/// Bilinear resize with half-pixel centers (source index clamped to the
/// border). Constant maps stay constant at any scale.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int oh, int ow) {
    Tensor<T> y(x.c, oh, ow);
    const double sy = static_cast<double>(x.h) / oh;
    const double sx = static_cast<double>(x.w) / ow;
    for (int j = 0; j < oh; ++j) {
        double fy = std::max(0.0, std::min((j + 0.5) * sy - 0.5, double(x.h - 1)));
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, x.h - 1);
        T wy = static_cast<T>(fy - y0);
        for (int i = 0; i < ow; ++i) {
            double fx = std::max(0.0, std::min((i + 0.5) * sx - 0.5, double(x.w - 1)));
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, x.w - 1);
            T wx = static_cast<T>(fx - x0);
            for (int ch = 0; ch < x.c; ++ch) {
                const T v00 = x.at(ch, y0, x0), v01 = x.at(ch, y0, x1);
                const T v10 = x.at(ch, y1, x0), v11 = x.at(ch, y1, x1);
                y.at(ch, j, i) = (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) +
                                 wy * ((T(1) - wx) * v10 + wx * v11);
            }
        }
    }
    return y;
}

template <typename T>
void bilinear_resize_backward(const Tensor<T>& x, int oh, int ow, const Tensor<T>& dy,
                              Tensor<T>& dx) {
    const double sy = static_cast<double>(x.h) / oh;
    const double sx = static_cast<double>(x.w) / ow;
    for (int j = 0; j < oh; ++j) {
        double fy = std::max(0.0, std::min((j + 0.5) * sy - 0.5, double(x.h - 1)));
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, x.h - 1);
        T wy = static_cast<T>(fy - y0);
        for (int i = 0; i < ow; ++i) {
            double fx = std::max(0.0, std::min((i + 0.5) * sx - 0.5, double(x.w - 1)));
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, x.w - 1);
            T wx = static_cast<T>(fx - x0);
            for (int ch = 0; ch < x.c; ++ch) {
                const T g = dy.at(ch, j, i);
                dx.at(ch, y0, x0) += (T(1) - wy) * (T(1) - wx) * g;
                dx.at(ch, y0, x1) += (T(1) - wy) * wx * g;
                dx.at(ch, y1, x0) += wy * (T(1) - wx) * g;
                dx.at(ch, y1, x1) += wy * wx * g;
            }
        }
    }
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    Tensor<T> y(x.c, 2 * x.h, 2 * x.w);
    for (int ch = 0; ch < x.c; ++ch)
        for (int j = 0; j < y.h; ++j)
            for (int i = 0; i < y.w; ++i) y.at(ch, j, i) = x.at(ch, j / 2, i / 2);
    return y;
}

template <typename T>
void upsample_nearest2x_backward(const Tensor<T>& dy, Tensor<T>& dx) {
    for (int ch = 0; ch < dx.c; ++ch)
        for (int j = 0; j < dy.h; ++j)
            for (int i = 0; i < dy.w; ++i) dx.at(ch, j / 2, i / 2) += dy.at(ch, j, i);
}

/// Read the feature map at continuous grid coordinates (fx, fy), where the
/// value of cell (j, i) sits at coordinates (i, j). Out-of-bounds corners
/// read as zero. Returns a (C x n) matrix of features.
template <typename T>
MatX<T> bilinear_sample_points(const Tensor<T>& x,
                               const std::vector<std::pair<double, double>>& pts) {
    MatX<T> out = MatX<T>::Zero(x.c, static_cast<Eigen::Index>(pts.size()));
    for (std::size_t n = 0; n < pts.size(); ++n) {
        const double fx = pts[n].first;
        const double fy = pts[n].second;
        const int x0 = static_cast<int>(std::floor(fx));
        const int y0 = static_cast<int>(std::floor(fy));
        const T wx = static_cast<T>(fx - x0);
        const T wy = static_cast<T>(fy - y0);
        const T cw[4] = {(T(1) - wy) * (T(1) - wx), (T(1) - wy) * wx, wy * (T(1) - wx),
                         wy * wx};
        const int cy[4] = {y0, y0, y0 + 1, y0 + 1};
        const int cx[4] = {x0, x0 + 1, x0, x0 + 1};
        for (int corner = 0; corner < 4; ++corner) {
            if (cy[corner] < 0 || cy[corner] >= x.h || cx[corner] < 0 || cx[corner] >= x.w)
                continue;
            if (cw[corner] == T(0)) continue;
            for (int ch = 0; ch < x.c; ++ch)
                out(ch, n) += cw[corner] * x.at(ch, cy[corner], cx[corner]);
        }
    }
    return out;
}

/// Scatter feature gradients back through bilinear sampling. Coordinates
/// are treated as constants.
template <typename T>
void bilinear_sample_points_backward(const Tensor<T>& x,
                                     const std::vector<std::pair<double, double>>& pts,
                                     const MatX<T>& dout, Tensor<T>& dx) {
    for (std::size_t n = 0; n < pts.size(); ++n) {
        const double fx = pts[n].first;
        const double fy = pts[n].second;
        const int x0 = static_cast<int>(std::floor(fx));
        const int y0 = static_cast<int>(std::floor(fy));
        const T wx = static_cast<T>(fx - x0);
        const T wy = static_cast<T>(fy - y0);
        const T cw[4] = {(T(1) - wy) * (T(1) - wx), (T(1) - wy) * wx, wy * (T(1) - wx),
                         wy * wx};
        const int cy[4] = {y0, y0, y0 + 1, y0 + 1};
        const int cx[4] = {x0, x0 + 1, x0, x0 + 1};
        for (int corner = 0; corner < 4; ++corner) {
            if (cy[corner] < 0 || cy[corner] >= x.h || cx[corner] < 0 || cx[corner] >= x.w)
                continue;
            if (cw[corner] == T(0)) continue;
            for (int ch = 0; ch < x.c; ++ch)
                dx.at(ch, cy[corner], cx[corner]) += cw[corner] * dout(ch, n);
        }
    }
}

}  // namespace dal::nn
