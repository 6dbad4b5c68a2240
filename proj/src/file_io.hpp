#ifndef BAYESQ_SRC_FILE_IO_HPP
#define BAYESQ_SRC_FILE_IO_HPP

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "bayesq/error.hpp"

namespace bayesq::detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("I/O failure writing " + path.string());
}

}  // namespace bayesq::detail

#endif  // BAYESQ_SRC_FILE_IO_HPP
