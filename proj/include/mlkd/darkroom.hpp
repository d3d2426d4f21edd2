// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired day/night sequences: a textured target moving over a
// textured background, degraded by a parametric darkening model whose exact
// inverse serves as the teacher's enhancer. On-disk layout is OTB-style so
// real sequences can be ingested through the same loader.

#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlkd/geometry.hpp"
#include "mlkd/image.hpp"
#include "mlkd/rng.hpp"

namespace mlkd {

inline const std::array<std::string, 5> kAttributes = {
    "fast-motion", "illumination-variation", "low-resolution", "occlusion", "viewpoint-change"};

inline bool valid_attribute(const std::string& a) {
  for (const auto& k : kAttributes)
    if (k == a) return true;
  return false;
}

struct DarkModel {
  double gamma = 3.0;
  double gain = 0.35;
  double noise_sigma = 0.02;
  uint64_t seed = 0;
};

// out = clamp(gain * v^gamma + N(0, sigma), 0, 1); noise drawn from `rng`
// in plane-major pixel order.
inline ImageF darken(const ImageF& img, const DarkModel& m, Rng& rng) {
  ImageF out(img.h, img.w);
  for (size_t i = 0; i < img.v.size(); ++i) {
    double v = m.gain * std::pow(img.v[i], m.gamma);
    if (m.noise_sigma > 0.0) v += rng.normal(0.0, m.noise_sigma);
    out.v[i] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

inline ImageF darken(const ImageF& img, const DarkModel& m) {
  Rng rng(m.seed);
  return darken(img, m, rng);
}

// Exact algebraic inverse of the noiseless darkening curve.
inline ImageF enhance(const ImageF& img, const DarkModel& m) {
  ImageF out(img.h, img.w);
  for (size_t i = 0; i < img.v.size(); ++i)
    out.v[i] = std::clamp(std::pow(std::max(img.v[i], 0.0) / m.gain, 1.0 / m.gamma), 0.0, 1.0);
  return out;
}

struct GenConfig {
  int num_sequences = 60;
  int frames_per_sequence = 40;
  int image_size = 96;
  std::vector<std::string> attribute_mix{kAttributes.begin(), kAttributes.end()};
  uint64_t seed = 1;
};

inline void validate(const GenConfig& cfg) {
  if (cfg.num_sequences < 1) throw std::invalid_argument("gen config: num_sequences must be >= 1");
  if (cfg.frames_per_sequence < 2)
    throw std::invalid_argument("gen config: frames_per_sequence must be >= 2");
  if (cfg.image_size < 64)
    throw std::invalid_argument("gen config: image_size must be >= 64 (search window size)");
  if (cfg.attribute_mix.empty())
    throw std::invalid_argument("gen config: attribute_mix must be non-empty");
  for (const auto& a : cfg.attribute_mix)
    if (!valid_attribute(a)) throw std::invalid_argument("gen config: unknown attribute " + a);
}

struct SequenceData {
  std::vector<ImageF> day;
  std::vector<BBox> boxes;
  std::vector<std::string> attributes;
  uint64_t seed = 0;
};

namespace detail {

// Static daylight background: per-channel sinusoid field plus soft blobs.
inline ImageF make_background(int size, Rng& rng) {
  ImageF bg(size, size);
  for (int c = 0; c < 3; ++c) {
    // daylight frames sit bright; the dark model needs headroom to matter
    const double base = rng.uniform(0.60, 0.80);
    const double fx = rng.uniform(1.0, 4.0) * 2.0 * M_PI / size;
    const double fy = rng.uniform(1.0, 4.0) * 2.0 * M_PI / size;
    const double ph = rng.uniform(0.0, 2.0 * M_PI);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        bg.at(c, y, x) = base + 0.08 * std::sin(fx * x + fy * y + ph);
  }
  for (int blob = 0; blob < 6; ++blob) {
    const double bx = rng.uniform(0.0, size);
    const double by = rng.uniform(0.0, size);
    const double r = rng.uniform(6.0, 14.0);
    double tint[3];
    for (auto& t : tint) t = rng.uniform(-0.10, 0.10);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double d2 = ((x - bx) * (x - bx) + (y - by) * (y - by)) / (r * r);
        if (d2 > 4.0) continue;
        const double f = std::exp(-d2);
        for (int c = 0; c < 3; ++c)
          bg.at(c, y, x) = std::clamp(bg.at(c, y, x) + tint[c] * f, 0.0, 1.0);
      }
  }
  return bg;
}

// High-contrast checker patch so the target is texturally distinct.
inline void draw_target(ImageF& frame, const BBox& box, const double c1[3], const double c2[3]) {
  const int x0 = static_cast<int>(std::floor(box.x0()));
  const int y0 = static_cast<int>(std::floor(box.y0()));
  const int x1 = static_cast<int>(std::ceil(box.x1()));
  const int y1 = static_cast<int>(std::ceil(box.y1()));
  for (int y = std::max(y0, 0); y < std::min(y1, frame.h); ++y)
    for (int x = std::max(x0, 0); x < std::min(x1, frame.w); ++x) {
      const bool edge = x - x0 < 1 || y - y0 < 1 || x1 - x <= 1 || y1 - y <= 1;
      const bool odd = ((x - x0) / 3 + (y - y0) / 3) % 2 != 0;
      for (int c = 0; c < 3; ++c)
        frame.at(c, y, x) = edge ? 0.95 : (odd ? c1[c] : c2[c]);
    }
}

inline void draw_occluder(ImageF& frame, double cx, double cy, double half) {
  for (int y = std::max(0, static_cast<int>(cy - half)); y < std::min(frame.h, static_cast<int>(cy + half)); ++y)
    for (int x = std::max(0, static_cast<int>(cx - half)); x < std::min(frame.w, static_cast<int>(cx + half)); ++x) {
      frame.at(0, y, x) = 0.30;
      frame.at(1, y, x) = 0.32;
      frame.at(2, y, x) = 0.28;
    }
}

}  // namespace detail

// One sequence, fully determined by (cfg, sequence_index).
inline SequenceData generate_sequence(const GenConfig& cfg, int index) {
  Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(index)));
  const int size = cfg.image_size;
  const std::string attr = cfg.attribute_mix[static_cast<size_t>(index) % cfg.attribute_mix.size()];
  const bool fast = attr == "fast-motion";
  const bool illum = attr == "illumination-variation";
  const bool lowres = attr == "low-resolution";
  const bool occl = attr == "occlusion";
  const bool view = attr == "viewpoint-change";

  SequenceData seq;
  seq.seed = mix_seed(cfg.seed, static_cast<uint64_t>(index));
  seq.attributes.push_back(attr);

  ImageF bg = detail::make_background(size, rng);
  double c1[3], c2[3];
  for (int c = 0; c < 3; ++c) {
    c1[c] = rng.uniform(0.0, 0.25);
    c2[c] = rng.uniform(0.75, 1.0);
  }

  const double w0 = lowres ? rng.uniform(7.0, 9.0) : rng.uniform(14.0, 20.0);
  const double h0 = w0 * rng.uniform(0.85, 1.2);
  double px = rng.uniform(size * 0.35, size * 0.65);
  double py = rng.uniform(size * 0.35, size * 0.65);
  double heading = rng.uniform(0.0, 2.0 * M_PI);
  const double scale_phase = rng.uniform(0.0, 2.0 * M_PI);
  const double illum_phase = rng.uniform(0.0, 2.0 * M_PI);
  double ox = rng.uniform(10.0, size - 10.0), oy = -6.0;  // occluder enters from the top

  for (int t = 0; t < cfg.frames_per_sequence; ++t) {
    double w = w0, h = h0;
    if (view) {
      w = w0 * (1.0 + 0.3 * std::sin(2.0 * M_PI * t / 20.0 + scale_phase));
      h = h0 * (1.0 + 0.3 * std::cos(2.0 * M_PI * t / 20.0 + scale_phase));
    }
    if (t > 0) {
      heading += rng.uniform(-0.5, 0.5);
      const double step = fast ? rng.uniform(8.5, 12.0) : rng.uniform(1.5, 4.0);
      double nx = px + step * std::cos(heading);
      double ny = py + step * std::sin(heading);
      // reflect off the walls so the full box stays in frame
      const double mx = w / 2.0 + 1.0, my = h / 2.0 + 1.0;
      if (nx < mx || nx > size - mx) {
        heading = M_PI - heading;
        nx = std::clamp(nx, mx, size - mx);
      }
      if (ny < my || ny > size - my) {
        heading = -heading;
        ny = std::clamp(ny, my, size - my);
      }
      px = nx;
      py = ny;
    } else {
      px = std::clamp(px, w / 2.0 + 1.0, size - w / 2.0 - 1.0);
      py = std::clamp(py, h / 2.0 + 1.0, size - h / 2.0 - 1.0);
    }

    ImageF frame = bg;
    BBox box{px, py, w, h};
    detail::draw_target(frame, box, c1, c2);
    if (occl) {
      oy += (size + 12.0) / cfg.frames_per_sequence * 1.5;  // crosses mid-sequence
      if (oy > size + 6.0) oy = -6.0;
      detail::draw_occluder(frame, ox, oy, 6.0);
    }
    if (illum) {
      const double gain = 1.0 + 0.25 * std::sin(2.0 * M_PI * t / 25.0 + illum_phase);
      for (auto& v : frame.v) v = std::clamp(v * gain, 0.0, 1.0);
    }
    seq.day.push_back(std::move(frame));
    seq.boxes.push_back(box.clamped(size, size));
  }
  return seq;
}

inline std::vector<SequenceData> generate(const GenConfig& cfg) {
  validate(cfg);
  std::vector<SequenceData> out;
  out.reserve(static_cast<size_t>(cfg.num_sequences));
  for (int i = 0; i < cfg.num_sequences; ++i) out.push_back(generate_sequence(cfg, i));
  return out;
}

// ---------------------------------------------------------------------------
// on-disk layout: 0001.png ... + groundtruth.txt + attributes.txt + meta.json

inline std::string frame_name(int index1) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d.png", index1);
  return buf;
}

inline std::string format_box_line(const BBox& b) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.2f,%.2f,%.2f,%.2f", b.x0(), b.y0(), b.w, b.h);
  return buf;
}

inline BBox parse_box_line(const std::string& line, const std::string& where) {
  double f[4];
  std::string cur;
  std::istringstream ss(line);
  int i = 0;
  while (std::getline(ss, cur, ',') && i < 4) {
    try {
      f[i++] = std::stod(cur);
    } catch (const std::exception&) {
      throw std::runtime_error(where + ": bad box line '" + line + "'");
    }
  }
  if (i != 4) throw std::runtime_error(where + ": bad box line '" + line + "'");
  return BBox::from_tlwh(f[0], f[1], f[2], f[3]);
}

// Writes the darkened rendition; the day frames exist only in memory. Noise
// per frame derives from (sequence seed, frame index) so regeneration is
// byte-identical.
inline void save_sequence(const std::filesystem::path& dir, const SequenceData& seq,
                          const DarkModel& model) {
  std::filesystem::create_directories(dir);
  for (size_t t = 0; t < seq.day.size(); ++t) {
    Rng noise(mix_seed(mix_seed(seq.seed, 0xDA5Cu), static_cast<uint64_t>(t)));
    write_png((dir / frame_name(static_cast<int>(t) + 1)).string(),
              darken(seq.day[t], model, noise));
  }
  std::ofstream gt(dir / "groundtruth.txt");
  for (const auto& b : seq.boxes) gt << format_box_line(b) << "\n";
  std::ofstream at(dir / "attributes.txt");
  for (const auto& a : seq.attributes) at << a << "\n";
  nlohmann::json meta{{"gamma", model.gamma},
                      {"gain", model.gain},
                      {"noise_sigma", model.noise_sigma},
                      {"seed", seq.seed},
                      {"frames", seq.day.size()},
                      {"width", seq.day.empty() ? 0 : seq.day[0].w},
                      {"height", seq.day.empty() ? 0 : seq.day[0].h}};
  std::ofstream mj(dir / "meta.json");
  mj << meta.dump(2) << "\n";
}

struct LoadedSequence {
  std::string name;
  std::vector<ImageF> frames;  // nighttime rendition as stored
  std::vector<BBox> boxes;
  std::vector<std::string> attributes;
  DarkModel model;
};

inline LoadedSequence load_sequence(const std::filesystem::path& dir) {
  LoadedSequence seq;
  seq.name = dir.filename().string();
  std::ifstream mj(dir / "meta.json");
  if (!mj) throw std::runtime_error("load_sequence: missing " + (dir / "meta.json").string());
  nlohmann::json meta = nlohmann::json::parse(mj);
  seq.model.gamma = meta.at("gamma").get<double>();
  seq.model.gain = meta.at("gain").get<double>();
  seq.model.noise_sigma = meta.at("noise_sigma").get<double>();
  seq.model.seed = meta.at("seed").get<uint64_t>();
  const int frames = meta.at("frames").get<int>();

  std::ifstream gt(dir / "groundtruth.txt");
  if (!gt) throw std::runtime_error("load_sequence: missing " + (dir / "groundtruth.txt").string());
  std::string line;
  while (std::getline(gt, line))
    if (!line.empty()) seq.boxes.push_back(parse_box_line(line, (dir / "groundtruth.txt").string()));

  std::ifstream at(dir / "attributes.txt");
  while (at && std::getline(at, line))
    if (!line.empty()) seq.attributes.push_back(line);

  for (int t = 1; t <= frames; ++t) seq.frames.push_back(read_png((dir / frame_name(t)).string()));
  if (seq.boxes.size() != seq.frames.size())
    throw std::runtime_error("load_sequence: " + dir.string() + " has " +
                             std::to_string(seq.frames.size()) + " frames but " +
                             std::to_string(seq.boxes.size()) + " ground-truth boxes");
  return seq;
}

// Sorted subdirectories of a dataset root that look like sequences.
inline std::vector<std::filesystem::path> list_sequences(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> dirs;
  if (!std::filesystem::is_directory(root))
    throw std::runtime_error("dataset root not found: " + root.string());
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && std::filesystem::exists(e.path() / "groundtruth.txt"))
      dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

}  // namespace mlkd
