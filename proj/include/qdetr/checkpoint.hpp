#pragma once

#include <string>

#include "qdetr/nn.hpp"

namespace qdetr {

// "QDTR" checkpoint: magic, u32 version, u32 tensor count, then a table of
// (u16 name length, utf-8 name, u32 rank, u64 extents..., u64 byte offset
// into the data blob), then raw float32 data. Little-endian throughout.
void save_checkpoint(const ParamStore& params, const std::string& path);

// Copies every checkpoint tensor into the matching parameter by name.
// Unknown checkpoint tensors and shape mismatches are errors that name the
// tensor. With allow_missing_in_checkpoint=false, parameters absent from the
// checkpoint are an error too (the strict stage-2 <- stage-1 mode).
void load_checkpoint(ParamStore& params, const std::string& path,
                     bool allow_missing_in_checkpoint = false);

}  // namespace qdetr
