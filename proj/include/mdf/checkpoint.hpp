#pragma once

#include <string>

#include "mdf/tape.hpp"

#include <nlohmann/json_fwd.hpp>

namespace mdf {

// Checkpoint container: 8-byte magic "MDFC0001", a uint64 little-endian
// header length, a JSON header {"version","meta","tensors":[{name,shape}]},
// then each tensor's values as little-endian doubles in header order.
// `meta` carries the resolved run config and normalization statistics so an
// evaluation run can rebuild the exact model that was trained.
inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'F', 'C', '0', '0', '0', '1'};

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& meta);

// Reads the header only.
nlohmann::json read_checkpoint_meta(const std::string& path);

// Fills an existing store; every stored tensor must exist with the same shape.
nlohmann::json load_checkpoint(const std::string& path, ParamStore& params);

}  // namespace mdf
