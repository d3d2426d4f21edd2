// SPDX-License-Identifier: Apache-2.0
//
// Small Siamese tracker: 3-conv backbone, depthwise cross-correlation,
// 1x1 classification/regression heads. One instance serves as the teacher
// (enhanced inputs, fully frozen after pretraining) and u instances as
// students (dark inputs, heads frozen, backbone trainable).

#pragma once

#include <chrono>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlkd/darkroom.hpp"
#include "mlkd/geometry.hpp"
#include "mlkd/image.hpp"
#include "mlkd/rng.hpp"
#include "mlkd/tensor.hpp"

namespace mlkd {

// 9x9 response grid over a 64x64 search window: cell (row i, col j) sits at
// image pixel (16 + 4j, 16 + 4i); regression logits are edge distances
// normalized by the window size.
struct GridGeometry {
  int image = 64;
  int offset = 16;
  int stride = 4;
  int cells = 9;

  double cell_x(int j) const { return offset + static_cast<double>(stride) * j; }
  double cell_y(int i) const { return offset + static_cast<double>(stride) * i; }
};

struct TrackerModel {
  Tensor b1w, b1b, b2w, b2b, b3w, b3b;  // backbone
  Tensor cls_w, cls_b, reg_w, reg_b;    // heads

  static TrackerModel init(uint64_t seed) {
    Rng rng(mix_seed(seed, 0x70C4u));
    TrackerModel m;
    auto kaiming = [&rng](const Shape& s) {
      const double fan_in = static_cast<double>(s[1]) * s[2] * s[3];
      const double bound = std::sqrt(6.0 / fan_in);
      std::vector<double> d(static_cast<size_t>(shape_numel(s)));
      for (auto& v : d) v = rng.uniform(-bound, bound);
      return Tensor::from_data(s, std::move(d), true);
    };
    m.b1w = kaiming({16, 3, 3, 3});
    m.b1b = Tensor::zeros({16}, true);
    m.b2w = kaiming({32, 16, 3, 3});
    m.b2b = Tensor::zeros({32}, true);
    m.b3w = kaiming({32, 32, 3, 3});
    m.b3b = Tensor::zeros({32}, true);
    m.cls_w = kaiming({2, 32, 1, 1});
    m.cls_b = Tensor::zeros({2}, true);
    m.reg_w = kaiming({4, 32, 1, 1});
    m.reg_b = Tensor::zeros({4}, true);
    return m;
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    return {{"b1w", b1w},     {"b1b", b1b},     {"b2w", b2w},     {"b2b", b2b},
            {"b3w", b3w},     {"b3b", b3b},     {"cls_w", cls_w}, {"cls_b", cls_b},
            {"reg_w", reg_w}, {"reg_b", reg_b}};
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  std::vector<Tensor> backbone_params() const { return {b1w, b1b, b2w, b2b, b3w, b3b}; }
  std::vector<Tensor> head_params() const { return {cls_w, cls_b, reg_w, reg_b}; }

  // Students train only the backbone.
  void freeze_heads() {
    for (auto&& t : head_params()) t.set_frozen(true);
  }

  // Teacher takes no gradients at all; its forwards record no graph.
  void freeze_all() {
    for (auto&& [name, t] : named_params()) {
      t.set_frozen(true);
      t.set_requires_grad(false);
    }
  }

  TrackerModel clone() const {
    TrackerModel m;
    auto copy = [](const Tensor& t) {
      Tensor c = Tensor::from_data(t.shape(), t.data(), t.requires_grad());
      c.set_frozen(t.frozen());
      return c;
    };
    m.b1w = copy(b1w);
    m.b1b = copy(b1b);
    m.b2w = copy(b2w);
    m.b2b = copy(b2b);
    m.b3w = copy(b3w);
    m.b3b = copy(b3b);
    m.cls_w = copy(cls_w);
    m.cls_b = copy(cls_b);
    m.reg_w = copy(reg_w);
    m.reg_b = copy(reg_b);
    return m;
  }
};

struct TrackOutputs {
  Tensor feat_t;  // 32x6x6
  Tensor feat_s;  // 32x14x14
  Tensor corr;    // 32x9x9, correlation normalized by template area
  Tensor cls;     // 2x9x9, channel 1 = foreground
  Tensor reg;     // 4x9x9, (left, top, right, bottom) / 64
};

inline Tensor backbone_forward(const TrackerModel& m, const Tensor& x) {
  Tensor h = relu(conv2d(x, m.b1w, m.b1b, 2, 0));
  h = relu(conv2d(h, m.b2w, m.b2b, 2, 1));
  return conv2d(h, m.b3w, m.b3b, 1, 0);
}

inline TrackOutputs forward(const TrackerModel& m, const Tensor& tmpl, const Tensor& search) {
  if (tmpl.shape() != Shape{3, 32, 32})
    throw std::invalid_argument("forward: template must be [3x32x32], got " +
                                shape_str(tmpl.shape()));
  if (search.shape() != Shape{3, 64, 64})
    throw std::invalid_argument("forward: search must be [3x64x64], got " +
                                shape_str(search.shape()));
  TrackOutputs out;
  out.feat_t = backbone_forward(m, tmpl);
  out.feat_s = backbone_forward(m, search);
  out.corr = scalar_mul(depthwise_xcorr(out.feat_t, out.feat_s), 1.0 / 36.0);
  out.cls = conv2d(out.corr, m.cls_w, m.cls_b, 1, 0);
  out.reg = conv2d(out.corr, m.reg_w, m.reg_b, 1, 0);
  return out;
}

// Foreground argmax position, lowest row-major index on ties.
inline std::pair<int, int> argmax_foreground(const Tensor& cls, const GridGeometry& g) {
  const auto& d = cls.data();
  const int n = g.cells;
  int best = 0;
  const size_t fg = static_cast<size_t>(n) * n;  // channel 1 offset
  for (int i = 1; i < n * n; ++i)
    if (d[fg + static_cast<size_t>(i)] > d[fg + static_cast<size_t>(best)]) best = i;
  return {best / n, best % n};
}

inline BBox decode_box(const Tensor& reg, const Tensor& cls, const GridGeometry& g = {}) {
  if (cls.shape() != Shape{2, g.cells, g.cells} || reg.shape() != Shape{4, g.cells, g.cells})
    throw std::invalid_argument("decode_box: expected cls [2x9x9]/reg [4x9x9], got " +
                                shape_str(cls.shape()) + "/" + shape_str(reg.shape()));
  auto [i, j] = argmax_foreground(cls, g);
  const double cx = g.cell_x(j), cy = g.cell_y(i);
  const int plane = g.cells * g.cells;
  const int at = i * g.cells + j;
  auto dist = [&](int ch) {
    return std::clamp(reg[static_cast<size_t>(ch * plane + at)] * g.image, 0.5,
                      static_cast<double>(g.image));
  };
  const double x0 = cx - dist(0), y0 = cy - dist(1);
  const double x1 = cx + dist(2), y1 = cy + dist(3);
  return BBox{(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0}.clamped(g.image, g.image);
}

struct TrackResult {
  std::vector<BBox> boxes;           // one per frame, [0] echoes ground truth
  std::vector<double> latencies_ms;  // per tracked frame (frames 1..N-1)
};

// One-pass protocol: template from frame 1 ground truth, search window
// centered on the previous prediction. use_enhancer routes every consumed
// crop through the oracle enhancer (teacher mode); the enhancement cost is
// part of the measured latency.
inline TrackResult track_sequence(const TrackerModel& model, const std::vector<ImageF>& frames,
                                  const BBox& gt0, bool use_enhancer, const DarkModel& dark) {
  if (frames.size() < 2)
    throw std::invalid_argument("track_sequence: need at least 2 frames, got " +
                                std::to_string(frames.size()));
  const GridGeometry geom;
  TrackResult res;
  res.boxes.push_back(gt0);

  ImageF tcrop = crop_window(frames[0], gt0.cx, gt0.cy, 32);
  if (use_enhancer) tcrop = enhance(tcrop, dark);
  Tensor tmpl = image_tensor(tcrop);

  BBox prev = gt0;
  for (size_t t = 1; t < frames.size(); ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    ImageF scrop = crop_window(frames[t], prev.cx, prev.cy, 64);
    if (use_enhancer) scrop = enhance(scrop, dark);
    TrackOutputs out = forward(model, tmpl, image_tensor(scrop));
    BBox local = decode_box(out.reg, out.cls, geom);
    const auto t1 = std::chrono::steady_clock::now();

    const double ox = std::lround(prev.cx) - 32.0;
    const double oy = std::lround(prev.cy) - 32.0;
    BBox global{local.cx + ox, local.cy + oy, local.w, local.h};
    prev = global.clamped(frames[t].w, frames[t].h);
    res.boxes.push_back(prev);
    res.latencies_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return res;
}

// ---------------------------------------------------------------------------
// checkpoints: "MLKD1" magic, little-endian u32 JSON header length, JSON
// parameter manifest, then raw 64-bit values in manifest order.

inline constexpr char kCheckpointMagic[5] = {'M', 'L', 'K', 'D', '1'};

inline void save_checkpoint(const TrackerModel& m, const std::string& path,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json manifest = nlohmann::json::array();
  for (auto& [name, t] : m.named_params())
    manifest.push_back({{"name", name}, {"shape", t.shape()}});
  const std::string header = nlohmann::json{{"params", manifest}, {"meta", meta}}.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, 5);
  const uint32_t len = static_cast<uint32_t>(header.size());
  unsigned char lenb[4] = {static_cast<unsigned char>(len & 0xff),
                           static_cast<unsigned char>((len >> 8) & 0xff),
                           static_cast<unsigned char>((len >> 16) & 0xff),
                           static_cast<unsigned char>((len >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(lenb), 4);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (auto& [name, t] : m.named_params())
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline TrackerModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[5];
  f.read(magic, 5);
  if (!f || std::memcmp(magic, kCheckpointMagic, 5) != 0)
    throw std::runtime_error("load_checkpoint: " + path + " is not an MLKD1 checkpoint");
  unsigned char lenb[4];
  f.read(reinterpret_cast<char*>(lenb), 4);
  const uint32_t len = static_cast<uint32_t>(lenb[0]) | (static_cast<uint32_t>(lenb[1]) << 8) |
                       (static_cast<uint32_t>(lenb[2]) << 16) |
                       (static_cast<uint32_t>(lenb[3]) << 24);
  std::string header(len, '\0');
  f.read(header.data(), len);
  if (!f) throw std::runtime_error("load_checkpoint: truncated header in " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const std::exception& e) {
    throw std::runtime_error("load_checkpoint: corrupt header in " + path + ": " + e.what());
  }

  TrackerModel ref = TrackerModel::init(0);  // shape reference
  TrackerModel m;
  std::vector<std::pair<std::string, Tensor*>> slots = {
      {"b1w", &m.b1w},     {"b1b", &m.b1b},     {"b2w", &m.b2w},     {"b2b", &m.b2b},
      {"b3w", &m.b3w},     {"b3b", &m.b3b},     {"cls_w", &m.cls_w}, {"cls_b", &m.cls_b},
      {"reg_w", &m.reg_w}, {"reg_b", &m.reg_b}};
  const auto& entries = manifest.at("params");
  if (entries.size() != slots.size())
    throw std::runtime_error("load_checkpoint: " + path + " holds " +
                             std::to_string(entries.size()) + " tensors, expected " +
                             std::to_string(slots.size()));
  auto ref_named = ref.named_params();
  for (size_t i = 0; i < slots.size(); ++i) {
    const std::string name = entries[i].at("name").get<std::string>();
    const Shape shape = entries[i].at("shape").get<Shape>();
    if (name != slots[i].first || shape != ref_named[i].second.shape())
      throw std::runtime_error("load_checkpoint: " + path + " tensor " + std::to_string(i) +
                               " is " + name + shape_str(shape) + ", expected " + slots[i].first +
                               shape_str(ref_named[i].second.shape()));
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("load_checkpoint: truncated data in " + path);
    *slots[i].second = Tensor::from_data(shape, std::move(data), true);
  }
  return m;
}

// Reads only the header metadata (training bookkeeping such as the last
// finished epoch) without touching the tensor payload.
inline nlohmann::json checkpoint_meta(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint_meta: cannot open " + path);
  char magic[5];
  f.read(magic, 5);
  if (!f || std::memcmp(magic, kCheckpointMagic, 5) != 0)
    throw std::runtime_error("checkpoint_meta: " + path + " is not an MLKD1 checkpoint");
  unsigned char lenb[4];
  f.read(reinterpret_cast<char*>(lenb), 4);
  const uint32_t len = static_cast<uint32_t>(lenb[0]) | (static_cast<uint32_t>(lenb[1]) << 8) |
                       (static_cast<uint32_t>(lenb[2]) << 16) |
                       (static_cast<uint32_t>(lenb[3]) << 24);
  std::string header(len, '\0');
  f.read(header.data(), len);
  if (!f) throw std::runtime_error("checkpoint_meta: truncated header in " + path);
  nlohmann::json h = nlohmann::json::parse(header);
  return h.contains("meta") ? h["meta"] : nlohmann::json::object();
}

}  // namespace mlkd
