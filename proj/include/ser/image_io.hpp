#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "ser/vision.hpp"

namespace ser {

/// Binary PPM (P6, maxval 255).
inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "'");
  out << "P6\n" << img.size << ' ' << img.size << "\n255\n";
  for (const float v : img.pixels) out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image '" + path + "'");
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || !in || maxval == 0 || maxval > 255)
    throw std::runtime_error("'" + path + "' is not an 8-bit binary PPM");
  if (w != h) throw std::runtime_error("'" + path + "' is not square");
  in.get();
  Image img;
  img.size = w;
  img.pixels.resize(w * h * 3);
  for (auto& p : img.pixels) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("'" + path + "' is truncated");
    p = static_cast<float>(c) / static_cast<float>(maxval);
  }
  return img;
}

}  // namespace ser
