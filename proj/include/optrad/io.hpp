#ifndef OPTRAD_IO_HPP_
#define OPTRAD_IO_HPP_

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace optrad {

using json = nlohmann::json;

/// Binary container shared by tables, contraction maps, feature matrices
/// and models:
///
///   8 bytes  magic "OPTRAD01"
///   uint64   header length (LE)
///   bytes    header, UTF-8 JSON
///   uint64   payload length in doubles (LE)
///   float64  payload (LE)
struct Blob {
  json header;
  std::vector<double> payload;
};

std::string encode_blob(const Blob& blob);
Blob decode_blob(const std::string& bytes);

void write_blob(const std::string& path, const Blob& blob);
Blob read_blob(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

/// Shortest round-trip representation of a double.
std::string format_double(double value);

/// Runs body(i) for i in [0, count) on up to `workers` threads (0 = all
/// cores). Each index is visited exactly once; callers write to
/// preallocated slots so results do not depend on scheduling.
void parallel_for(std::size_t count, int workers,
                  const std::function<void(std::size_t)>& body);

}  // namespace optrad

#endif  // OPTRAD_IO_HPP_
