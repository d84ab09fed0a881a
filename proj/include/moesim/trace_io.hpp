// trace_io.hpp - line-delimited JSON trace files
//
// Line 1 is the config record:
//   {"record":"config","name":..,"num_layers":..,"num_routed":..,
//    "num_shared":..,"num_activated":..,"routed_hidden":..,
//    "routed_intermediate":..,"shared_hidden":..|null,
//    "shared_intermediate":..|null,"bytes_per_weight":..,"metadata":{..}}
// Every following line is one layer of one pass, in pass then layer order:
//   {"pass":..,"stage":"prefill"|"decode","token_count":..,"layer":..,
//    "loads":[..],"scores":[..]}
// Fields are written in exactly this order. Doubles use the shortest text
// that reads back to the same value, so save -> load is the identity.

#pragma once

#include <iosfwd>
#include <string>

#include "moesim/model.hpp"

namespace moesim {

void write_trace(std::ostream& out, const Trace& trace);

// Throws DataError naming the line number and field of the first problem.
Trace read_trace(std::istream& in);

void save_trace(const Trace& trace, const std::string& path);
Trace load_trace(const std::string& path);

}  // namespace moesim
