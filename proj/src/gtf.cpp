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

#include "attnforge/gtf.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace attnforge {

namespace {

static_assert(std::endian::native == std::endian::little,
              "GTF1 I/O assumes a little-endian host");

constexpr char kMagic[4] = {'G', 'T', 'F', '1'};

}  // namespace

void write_gtf(const std::string& path, const Tensor& t) {
    if (t.rank() > 255) throw std::invalid_argument("write_gtf: rank exceeds u8");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_gtf: cannot open " + path);
    f.write(kMagic, 4);
    const uint8_t rank = static_cast<uint8_t>(t.rank());
    f.write(reinterpret_cast<const char*>(&rank), 1);
    for (int64_t e : t.shape()) {
        if (e > UINT32_MAX) throw std::invalid_argument("write_gtf: extent exceeds u32");
        const uint32_t ext = static_cast<uint32_t>(e);
        f.write(reinterpret_cast<const char*>(&ext), 4);
    }
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw std::runtime_error("write_gtf: short write to " + path);
}

Tensor read_gtf(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_gtf: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("read_gtf: bad magic in " + path);
    }
    uint8_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 1);
    if (!f) throw std::runtime_error("read_gtf: truncated header in " + path);
    std::vector<int64_t> shape(rank);
    for (uint8_t i = 0; i < rank; ++i) {
        uint32_t ext = 0;
        f.read(reinterpret_cast<char*>(&ext), 4);
        if (!f) throw std::runtime_error("read_gtf: truncated extents in " + path);
        shape[i] = static_cast<int64_t>(ext);
    }
    const int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!f) throw std::runtime_error("read_gtf: truncated payload in " + path);
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace attnforge
