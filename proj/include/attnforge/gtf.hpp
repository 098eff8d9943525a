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

#include <string>

#include "attnforge/tensor.hpp"

namespace attnforge {

// GTF1 tensor file: magic "GTF1", u8 rank, rank x u32 little-endian extents,
// then product(extents) little-endian IEEE-754 f64 values, row-major.

void write_gtf(const std::string& path, const Tensor& t);
Tensor read_gtf(const std::string& path);

}  // namespace attnforge
