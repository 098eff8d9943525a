// Copyright (c) 2026 The attnforge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace attnforge {

/// Dense row-major N-D array of f64 values. The shape is fixed at
/// construction and product(shape) == data.size() always holds; operations
/// never mutate their inputs and return fresh tensors.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);                      // zero-filled
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor full(std::vector<int64_t> shape, double value);
    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor ones(std::vector<int64_t> shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t extent(int64_t axis) const;
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }

    std::vector<int64_t> strides() const;                             // row-major, in elements
    int64_t offset_of(std::span<const int64_t> index) const;
    double at(std::initializer_list<int64_t> index) const;
    double& at(std::initializer_list<int64_t> index);

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool bit_equal(const Tensor& other) const;

    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

std::string shape_to_string(std::span<const int64_t> shape);
int64_t shape_numel(std::span<const int64_t> shape);

}  // namespace attnforge
