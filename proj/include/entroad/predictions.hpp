#pragma once

// Raw prediction files consumed by evaluation: "EAPM" | u16 version | u32 len |
// JSON {image_id, H, W, score, a_loc, a_ret, gate, config_hash} | fused map as
// H*W f64.

#include "entroad/error.hpp"
#include "entroad/inference.hpp"
#include "entroad/tensor_io.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace entroad {

inline constexpr std::string_view kPredictionMagic = "EAPM";
inline constexpr std::uint16_t kPredictionVersion = 1;

inline io::json result_summary(const AnomalyResult& r) {
  return {{"image_id", r.image_id}, {"score", r.score}, {"a_loc", r.a_loc}, {"a_ret", r.a_ret}, {"gate", r.gate}};
}

inline void write_prediction(const AnomalyResult& r, const std::filesystem::path& path,
                             const std::string& config_hash = "") {
  io::json header = result_summary(r);
  header["H"] = r.H;
  header["W"] = r.W;
  header["config_hash"] = config_hash;
  io::BinaryWriter w(path);
  w.write_header(kPredictionMagic, kPredictionVersion, header);
  w.write_vector_f64(r.map);
  w.close();
}

inline AnomalyResult read_prediction(const std::filesystem::path& path) {
  io::BinaryReader rd(path);
  const io::json h = rd.read_header(kPredictionMagic, kPredictionVersion);
  AnomalyResult r;
  r.image_id = io::header_get<std::string>(h, "image_id", path);
  r.H = io::header_get<int>(h, "H", path);
  r.W = io::header_get<int>(h, "W", path);
  r.score = io::header_get<double>(h, "score", path);
  r.a_loc = io::header_get<double>(h, "a_loc", path);
  r.a_ret = io::header_get<double>(h, "a_ret", path);
  r.gate = io::header_get<double>(h, "gate", path);
  if (r.H < 1 || r.W < 1) {
    throw DataError("'" + path.string() + "': bad map geometry");
  }
  r.map = rd.read_vector_f64(static_cast<Eigen::Index>(r.H) * r.W, "map");
  if (!rd.at_end()) {
    throw DataError("'" + path.string() + "': trailing bytes");
  }
  return r;
}

} // namespace entroad
