#pragma once

#include <string>

#include "ditair/params.hpp"

namespace ditair {

// Checkpoint container, little-endian throughout:
//   magic "DITA" | version u32 | count u64
//   per tensor: name_len u32, name bytes, rank u32, dims i64 * rank,
//               data f32 * numel
// Tensors are written in store order, which is the canonical construction
// order, so two stores built from the same plan always round-trip.

inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path);

// Loads into an already-built store. Names, order and shapes must match
// exactly; anything else is a ConfigError.
template <typename T>
void load_checkpoint(ParamStore<T>& store, const std::string& path);

}  // namespace ditair
