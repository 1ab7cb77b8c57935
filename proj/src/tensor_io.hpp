#pragma once

#include <string>

#include "tensor.hpp"

namespace polydet::nn {

// Tensor file format: magic "DKT1", u32 rank, u32 dims, f64 values,
// all little-endian, values row-major. Used by fixtures and checkpoints.
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

}  // namespace polydet::nn
