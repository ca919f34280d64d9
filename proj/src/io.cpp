#include "optrad/io.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "optrad/error.hpp"

namespace optrad {

namespace {

constexpr char kMagic[8] = {'O', 'P', 'T', 'R', 'A', 'D', '0', '1'};

void put_u64(std::string& out, std::uint64_t value) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xffu));
  }
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  if (pos + 8 > in.size()) {
    throw ValidationError("io", "truncated blob");
  }
  std::uint64_t value = 0;
  for (int i = 0; i < 8; ++i) {
    value |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i]))
             << (8 * i);
  }
  return value;
}

}  // namespace

std::string encode_blob(const Blob& blob) {
  static_assert(std::endian::native == std::endian::little,
                "payload encoding assumes a little-endian host");
  const std::string header = blob.header.dump();
  std::string out(kMagic, kMagic + 8);
  put_u64(out, header.size());
  out += header;
  put_u64(out, blob.payload.size());
  const auto offset = out.size();
  out.resize(offset + blob.payload.size() * sizeof(double));
  if (!blob.payload.empty()) {
    std::memcpy(out.data() + offset, blob.payload.data(),
                blob.payload.size() * sizeof(double));
  }
  return out;
}

Blob decode_blob(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw ValidationError("io", "not an optrad blob (bad magic)");
  }
  std::size_t pos = 8;
  const auto header_len = get_u64(bytes, pos);
  pos += 8;
  if (pos + header_len > bytes.size()) {
    throw ValidationError("io", "truncated blob header");
  }
  Blob blob;
  try {
    blob.header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::exception& e) {
    throw ValidationError("io", std::string("malformed blob header: ") +
                                    e.what());
  }
  pos += header_len;
  const auto count = get_u64(bytes, pos);
  pos += 8;
  if (bytes.size() - pos != count * sizeof(double)) {
    throw ValidationError("io", "blob payload size mismatch");
  }
  blob.payload.resize(count);
  if (count > 0) {
    std::memcpy(blob.payload.data(), bytes.data() + pos,
                count * sizeof(double));
  }
  return blob;
}

void write_blob(const std::string& path, const Blob& blob) {
  write_text_file(path, encode_blob(blob));
}

Blob read_blob(const std::string& path) {
  return decode_blob(read_text_file(path));
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw RuntimeError("io", "cannot open '" + path + "' for reading");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw RuntimeError("io", "cannot open '" + path + "' for writing");
  }
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) {
    throw RuntimeError("io", "write to '" + path + "' failed");
  }
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) {
    return "nan";
  }
  return std::string(buf, ptr);
}

void parallel_for(std::size_t count, int workers,
                  const std::function<void(std::size_t)>& body) {
  std::size_t threads =
      workers > 0 ? static_cast<std::size_t>(workers)
                  : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const auto i = next.fetch_add(1);
        if (i >= count) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next.store(count);
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace optrad
