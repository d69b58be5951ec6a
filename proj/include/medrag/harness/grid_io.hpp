#pragma once

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "medrag/codec.hpp"
#include "medrag/error.hpp"
#include "medrag/vecmath.hpp"

// Plain-text image grids: `GRID v1 <H> <W>` then H lines of W floats.
namespace medrag::harness {

inline PixelGrid read_grid(std::istream& in, const std::string& origin = "grid") {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(origin + ": empty file");
  const auto head = codec::split_ws(line);
  std::size_t h = 0, w = 0;
  if (head.size() != 4 || head[0] != "GRID" || head[1] != "v1" || !codec::parse_int(head[2], h) ||
      !codec::parse_int(head[3], w) || h == 0 || w == 0) {
    throw FormatError(origin + ": expected header 'GRID v1 <H> <W>'");
  }
  PixelGrid g(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    if (!std::getline(in, line)) throw FormatError(origin + ": missing row " + std::to_string(r + 1));
    const auto toks = codec::split_ws(line);
    if (toks.size() != w) {
      throw FormatError(origin + ": row " + std::to_string(r + 1) + " has " +
                        std::to_string(toks.size()) + " values, expected " + std::to_string(w));
    }
    for (std::size_t c = 0; c < w; ++c) {
      double v;
      if (!codec::parse_double(toks[c], v) || !std::isfinite(v)) {
        throw FormatError(origin + ": bad value '" + std::string(toks[c]) + "' in row " +
                          std::to_string(r + 1));
      }
      g.at(r, c) = v;
    }
  }
  while (std::getline(in, line)) {
    if (!codec::split_ws(line).empty()) throw FormatError(origin + ": trailing data after grid");
  }
  return g;
}

inline PixelGrid load_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open grid '" + path + "'");
  return read_grid(in, path);
}

inline void write_grid(std::ostream& out, const PixelGrid& g) {
  out << "GRID v1 " << g.height << ' ' << g.width << '\n';
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) {
      if (c) out << ' ';
      out << codec::format_double(g.at(r, c));
    }
    out << '\n';
  }
}

inline void save_grid(const std::string& path, const PixelGrid& g) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write grid '" + path + "'");
  write_grid(out, g);
}

}  // namespace medrag::harness
