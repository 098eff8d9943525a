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

#include "attnforge/tensor.hpp"

#include <cstring>
#include <sstream>
#include <stdexcept>

namespace attnforge {

namespace {

void check_shape(const std::vector<int64_t>& shape) {
    for (int64_t e : shape) {
        if (e <= 0) {
            throw std::invalid_argument("Tensor: extents must be positive, got shape " +
                                        shape_to_string(shape));
        }
    }
}

}  // namespace

int64_t shape_numel(std::span<const int64_t> shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

std::string shape_to_string(std::span<const int64_t> shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
        throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = value;
    return t;
}

int64_t Tensor::extent(int64_t axis) const {
    if (axis < 0 || axis >= rank()) {
        throw std::invalid_argument("Tensor::extent: axis " + std::to_string(axis) +
                                    " out of range for rank " + std::to_string(rank()));
    }
    return shape_[static_cast<size_t>(axis)];
}

std::vector<int64_t> Tensor::strides() const {
    std::vector<int64_t> s(shape_.size(), 1);
    for (int64_t i = rank() - 2; i >= 0; --i) {
        s[static_cast<size_t>(i)] = s[static_cast<size_t>(i + 1)] * shape_[static_cast<size_t>(i + 1)];
    }
    return s;
}

int64_t Tensor::offset_of(std::span<const int64_t> index) const {
    if (static_cast<int64_t>(index.size()) != rank()) {
        throw std::invalid_argument("Tensor::offset_of: index rank mismatch");
    }
    int64_t off = 0;
    for (int64_t i = 0; i < rank(); ++i) {
        int64_t ix = index[static_cast<size_t>(i)];
        if (ix < 0 || ix >= shape_[static_cast<size_t>(i)]) {
            throw std::out_of_range("Tensor::offset_of: index out of bounds");
        }
        off = off * shape_[static_cast<size_t>(i)] + ix;
    }
    return off;
}

double Tensor::at(std::initializer_list<int64_t> index) const {
    return data_[static_cast<size_t>(offset_of(std::span<const int64_t>(index.begin(), index.size())))];
}

double& Tensor::at(std::initializer_list<int64_t> index) {
    return data_[static_cast<size_t>(offset_of(std::span<const int64_t>(index.begin(), index.size())))];
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace attnforge
