#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "sparseloc/locnet.hpp"
#include "sparseloc/trainer.hpp"

namespace sparseloc {

/// Checkpoint file: magic "SLCP", a format version, then ordered records
/// of (name, shape, little-endian float32 data). Network parameters and
/// norm running buffers are always present; optimizer moments and the
/// epoch counter are included after training so a run can resume exactly.
struct Checkpoint {
  net::LocNetParams<float> params;
  std::optional<train::AdamState<float>> opt;
  std::int64_t epoch = 0;
};

void save_checkpoint(const std::string& path, const net::LocNetParams<float>& params,
                     const train::AdamState<float>* opt, std::int64_t epoch);

/// Loads and validates every record shape against the architecture.
Checkpoint load_checkpoint(const std::string& path, const net::ArchConfig& arch);

}  // namespace sparseloc
