#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <tuple>

#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"
#include "headpose/roi_detector.hpp"

namespace headpose {

using nlohmann::json;

namespace {

struct PyramidLevel {
  GrayImage image;
  double scale_x = 1.0;  // base pixels per level pixel
  double scale_y = 1.0;
};

std::vector<PyramidLevel> build_pyramid(const GrayImage& base, const LinearDetector& d) {
  std::vector<PyramidLevel> levels;
  for (int l = 0; l < d.levels; ++l) {
    const double s = std::pow(d.scale_step, l);
    const int h = static_cast<int>(std::lround(base.height / s));
    const int w = static_cast<int>(std::lround(base.width / s));
    if (h < d.window_h || w < d.window_w) break;
    PyramidLevel level;
    level.image = l == 0 ? base : resize_bilinear(base, h, w);
    level.scale_x = static_cast<double>(base.width) / w;
    level.scale_y = static_cast<double>(base.height) / h;
    levels.push_back(std::move(level));
  }
  return levels;
}

// Window at cell (cx0, cy0) of a level, in base pixel-index coordinates.
Roi window_roi(const PyramidLevel& level, const LinearDetector& d, int cx0, int cy0, double score) {
  const double u = cx0 * d.hog.cell + 0.5 * (d.window_w - 1);
  const double v = cy0 * d.hog.cell + 0.5 * (d.window_h - 1);
  return {(u + 0.5) * level.scale_x - 0.5, (v + 0.5) * level.scale_y - 0.5, d.window_w * level.scale_x,
          d.window_h * level.scale_y, score};
}

std::string channel_name(DetectorChannel c) { return c == DetectorChannel::Ir ? "ir" : "luminance"; }

}  // namespace

std::size_t LinearDetector::descriptor_length() const {
  const std::size_t bw = cells_w() - hog.block + 1;
  const std::size_t bh = cells_h() - hog.block + 1;
  return bw * bh * hog.block * hog.block * hog.bins;
}

void LinearDetector::validate() const {
  if (hog.cell < 1 || hog.bins < 1 || hog.block < 1) throw ValidationError("invalid HOG parameters");
  if (window_w % hog.cell != 0 || window_h % hog.cell != 0) {
    throw ValidationError("detector window must be a whole number of cells");
  }
  if (cells_w() < hog.block || cells_h() < hog.block) throw ValidationError("detector window smaller than a block");
  if (stride < hog.cell || stride % hog.cell != 0) throw ValidationError("stride must be a multiple of the cell size");
  if (!(scale_step > 1.0) || levels < 1) throw ValidationError("pyramid needs scale_step > 1 and >= 1 level");
  if (!weights.empty() && weights.size() != descriptor_length()) {
    throw ValidationError("detector weight length " + std::to_string(weights.size()) +
                          " does not match descriptor length " + std::to_string(descriptor_length()));
  }
}

void to_json(json& j, const LinearDetector& d) {
  j = json{{"format", "headpose-detector-1"},
           {"window", {d.window_w, d.window_h}},
           {"cell", d.hog.cell},
           {"bins", d.hog.bins},
           {"block", d.hog.block},
           {"stride", d.stride},
           {"scale_step", d.scale_step},
           {"levels", d.levels},
           {"channel", channel_name(d.channel)},
           {"weights", d.weights},
           {"bias", d.bias},
           {"threshold", d.threshold}};
}

void from_json(const json& j, LinearDetector& d) {
  const auto window = j.at("window").get<std::array<int, 2>>();
  d.window_w = window[0];
  d.window_h = window[1];
  d.hog.cell = j.at("cell").get<int>();
  d.hog.bins = j.at("bins").get<int>();
  d.hog.block = j.at("block").get<int>();
  d.stride = j.value("stride", d.hog.cell);
  d.scale_step = j.value("scale_step", 1.25);
  d.levels = j.value("levels", 3);
  const auto ch = j.value("channel", std::string("ir"));
  if (ch != "ir" && ch != "luminance") throw ValidationError("unknown detector channel: " + ch);
  d.channel = ch == "ir" ? DetectorChannel::Ir : DetectorChannel::Luminance;
  d.weights = j.at("weights").get<std::vector<double>>();
  d.bias = j.at("bias").get<double>();
  d.threshold = j.at("threshold").get<double>();
  d.validate();
}

void save_detector(const std::filesystem::path& path, const LinearDetector& d) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("cannot write detector to " + path.string());
  os << json(d).dump(1) << '\n';
}

LinearDetector load_detector(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot read detector " + path.string());
  try {
    return json::parse(is).get<LinearDetector>();
  } catch (const json::exception& e) {
    throw ValidationError("invalid detector file " + path.string() + ": " + e.what());
  }
}

LinearDetector train_detector(std::span<const std::vector<float>> positives,
                              std::span<const std::vector<float>> negatives, const LinearDetector& layout,
                              const DetectorTrainOptions& options, DetectorTrainReport* report) {
  if (positives.empty() || negatives.empty()) {
    throw ValidationError("detector training needs both positive and negative windows");
  }
  if (positives.size() < kMinWindowsPerClass || negatives.size() < kMinWindowsPerClass) {
    throw ValidationError("detector training needs >= " + std::to_string(kMinWindowsPerClass) +
                          " windows per class");
  }
  LinearDetector out = layout;
  out.weights.clear();
  out.validate();
  const std::size_t dim = layout.descriptor_length();
  for (const auto* set : {&positives, &negatives}) {
    for (const auto& w : *set) {
      if (w.size() != dim) throw ValidationError("window descriptor length does not match detector layout");
    }
  }

  // Stratified hold-out; each class is permuted by the same seed so that the
  // split depends only on class sizes.
  auto split = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(options.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n * options.holdout_fraction)));
    return std::pair{std::vector<std::size_t>(idx.begin() + held, idx.end()),
                     std::vector<std::size_t>(idx.begin(), idx.begin() + held)};
  };
  const auto [pos_fit, pos_held] = split(positives.size());
  const auto [neg_fit, neg_held] = split(negatives.size());

  const std::size_t n_fit = pos_fit.size() + neg_fit.size();
  Eigen::MatrixXd x(n_fit, dim + 1);
  Eigen::VectorXd y(n_fit);
  std::size_t row = 0;
  for (std::size_t i : pos_fit) {
    for (std::size_t k = 0; k < dim; ++k) x(row, k) = positives[i][k];
    x(row, dim) = 1.0;
    y(row++) = 1.0;
  }
  for (std::size_t i : neg_fit) {
    for (std::size_t k = 0; k < dim; ++k) x(row, k) = negatives[i][k];
    x(row, dim) = 1.0;
    y(row++) = -1.0;
  }
  Eigen::MatrixXd gram = x.transpose() * x;
  gram.diagonal().head(dim).array() += options.ridge_lambda;
  const Eigen::VectorXd rhs = x.transpose() * y;
  const Eigen::VectorXd sol = gram.ldlt().solve(rhs);
  if (!sol.allFinite()) throw RuntimeError("detector ridge solve produced non-finite weights");
  out.weights.assign(sol.data(), sol.data() + dim);
  out.bias = sol(dim);

  auto score = [&](const std::vector<float>& f) {
    double s = out.bias;
    for (std::size_t k = 0; k < dim; ++k) s += out.weights[k] * f[k];
    return s;
  };
  std::vector<std::pair<double, int>> held;  // (score, label)
  for (std::size_t i : pos_held) held.emplace_back(score(positives[i]), 1);
  for (std::size_t i : neg_held) held.emplace_back(score(negatives[i]), 0);
  std::sort(held.begin(), held.end());
  const double n_pos = static_cast<double>(pos_held.size());
  const double n_neg = static_cast<double>(neg_held.size());
  // Threshold below held[i] classifies held[i..] as positive.
  double best_acc = -1.0;
  double best_threshold = held.front().first - 1.0;
  double neg_below = 0.0;
  double pos_below = 0.0;
  for (std::size_t i = 0; i <= held.size(); ++i) {
    if (i == 0 || i == held.size() || held[i].first != held[i - 1].first) {
      const double acc = 0.5 * ((n_pos - pos_below) / n_pos + neg_below / n_neg);
      if (acc > best_acc) {
        best_acc = acc;
        if (i == 0) {
          best_threshold = held.front().first - 1.0;
        } else if (i == held.size()) {
          best_threshold = held.back().first + 1.0;
        } else {
          best_threshold = 0.5 * (held[i - 1].first + held[i].first);
        }
      }
    }
    if (i < held.size()) (held[i].second ? pos_below : neg_below) += 1.0;
  }
  out.threshold = best_threshold;
  if (report) {
    report->holdout_balanced_accuracy = best_acc;
    report->positives = positives.size();
    report->negatives = negatives.size();
  }
  return out;
}

std::vector<Roi> score_windows(const GrayImage& img, const LinearDetector& d) {
  d.validate();
  if (d.weights.size() != d.descriptor_length()) throw ValidationError("detector is not trained");
  std::vector<Roi> out;
  const int step = d.stride / d.hog.cell;
  for (const auto& level : build_pyramid(img, d)) {
    const HogBlockGrid grid(level.image, d.hog);
    for (int cy = 0; cy + d.cells_h() <= grid.cells_y(); cy += step) {
      for (int cx = 0; cx + d.cells_w() <= grid.cells_x(); cx += step) {
        const double s = d.bias + grid.score(cx, cy, d.cells_w(), d.cells_h(), d.weights);
        out.push_back(window_roi(level, d, cx, cy, s));
      }
    }
  }
  return out;
}

std::optional<Roi> detect(const GrayImage& img, const LinearDetector& d) {
  const auto windows = score_windows(img, d);
  const Roi* best = nullptr;
  for (const auto& w : windows) {
    if (!best || w.score > best->score) best = &w;
  }
  if (!best || best->score < d.threshold) return std::nullopt;
  return *best;
}

std::optional<Roi> detect(const Frame& frame, const LinearDetector& d) {
  return detect(gray_from(frame, d.channel), d);
}

Roi refine_roi_depth(const Frame& frame, const Roi& roi, double grow, int passes) {
  if (!(grow > 0.0) || passes < 0) throw ValidationError("refine_roi_depth needs grow > 0 and passes >= 0");
  Roi out = roi;
  for (int pass = 0; pass < passes; ++pass) {
    const double hw = 0.5 * grow * out.width;
    const double hh = 0.5 * grow * out.height;
    const int u0 = std::max(0, static_cast<int>(std::ceil(out.center_u - hw)));
    const int u1 = std::min(frame.width - 1, static_cast<int>(std::floor(out.center_u + hw)));
    const int v0 = std::max(0, static_cast<int>(std::ceil(out.center_v - hh)));
    const int v1 = std::min(frame.height - 1, static_cast<int>(std::floor(out.center_v + hh)));
    double su = 0.0;
    double sv = 0.0;
    std::size_t n = 0;
    for (int v = v0; v <= v1; ++v) {
      for (int u = u0; u <= u1; ++u) {
        if (frame.at(Channel::Depth, v, u) <= 0.0f) continue;
        su += u;
        sv += v;
        ++n;
      }
    }
    if (n == 0) break;
    out.center_u = su / static_cast<double>(n);
    out.center_v = sv / static_cast<double>(n);
  }
  return out;
}

Roi oracle_roi(const VirtualCamera& camera, const RigidTransform& pose, const HeadPhantom& phantom) {
  double u0 = std::numeric_limits<double>::infinity();
  double v0 = u0;
  double u1 = -u0;
  double v1 = -u0;
  for (std::size_t i = 0; i < phantom.size(); ++i) {
    if (!phantom.is_face[i]) continue;
    const Vec3 p = apply(pose, phantom.points[i]);
    if (p.z() <= 0.0) continue;
    const auto uv = camera.project(p);
    u0 = std::min(u0, uv.x());
    u1 = std::max(u1, uv.x());
    v0 = std::min(v0, uv.y());
    v1 = std::max(v1, uv.y());
  }
  u0 = std::max(u0, -0.5);
  v0 = std::max(v0, -0.5);
  u1 = std::min(u1, camera.width - 0.5);
  v1 = std::min(v1, camera.height - 0.5);
  if (!(u1 > u0) || !(v1 > v0)) throw ValidationError("face region does not project into the image");
  return {0.5 * (u0 + u1), 0.5 * (v0 + v1), u1 - u0, v1 - v0, 0.0};
}

Frame crop(const Frame& frame, const Roi& roi, int crop_px) {
  if (crop_px < 1 || crop_px > frame.width || crop_px > frame.height) {
    throw ValidationError("crop of " + std::to_string(crop_px) + " px does not fit a " + std::to_string(frame.width) +
                          "x" + std::to_string(frame.height) + " frame");
  }
  const double half = 0.5 * (crop_px - 1);
  const int u0 = std::clamp(static_cast<int>(std::lround(roi.center_u - half)), 0, frame.width - crop_px);
  const int v0 = std::clamp(static_cast<int>(std::lround(roi.center_v - half)), 0, frame.height - crop_px);
  Frame out = Frame::blank(crop_px, crop_px);
  out.id = frame.id;
  out.ground_truth = frame.ground_truth;
  out.noise_seed = frame.noise_seed;
  for (int c = 0; c < kFrameChannels; ++c) {
    const auto ch = static_cast<Channel>(c);
    for (int v = 0; v < crop_px; ++v) {
      for (int u = 0; u < crop_px; ++u) out.at(ch, v, u) = frame.at(ch, v0 + v, u0 + u);
    }
  }
  return out;
}

WindowSet collect_windows(std::span<const Frame> frames, const VirtualCamera& camera, const HeadPhantom& phantom,
                          const LinearDetector& layout, int negatives_per_frame, double min_negative_offset_px,
                          std::uint64_t seed) {
  layout.validate();
  WindowSet out;
  std::mt19937_64 rng(seed);
  const int step = layout.stride / layout.hog.cell;
  for (const auto& frame : frames) {
    const Roi target = oracle_roi(camera, frame.ground_truth, phantom);
    const auto pyramid = build_pyramid(gray_from(frame, layout.channel), layout);
    std::vector<HogBlockGrid> grids;
    for (const auto& level : pyramid) grids.emplace_back(level.image, layout.hog);

    // Positive: level whose window best matches the ROI size, nearest window.
    const double roi_size = std::sqrt(target.width * target.height);
    std::size_t best_level = 0;
    double best_ratio = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < pyramid.size(); ++l) {
      const double size = std::sqrt(layout.window_w * pyramid[l].scale_x * layout.window_h * pyramid[l].scale_y);
      const double ratio = std::abs(std::log(size / roi_size));
      if (ratio < best_ratio) {
        best_ratio = ratio;
        best_level = l;
      }
    }
    struct Candidate {
      std::size_t level;
      int cx, cy;
      double dist;
    };
    std::vector<Candidate> candidates;
    for (std::size_t l = 0; l < pyramid.size(); ++l) {
      for (int cy = 0; cy + layout.cells_h() <= grids[l].cells_y(); cy += step) {
        for (int cx = 0; cx + layout.cells_w() <= grids[l].cells_x(); cx += step) {
          const Roi w = window_roi(pyramid[l], layout, cx, cy, 0.0);
          candidates.push_back({l, cx, cy, std::hypot(w.center_u - target.center_u, w.center_v - target.center_v)});
        }
      }
    }
    const Candidate* pos = nullptr;
    for (const auto& c : candidates) {
      if (c.level == best_level && (!pos || c.dist < pos->dist)) pos = &c;
    }
    if (pos) out.positives.push_back(grids[pos->level].window(pos->cx, pos->cy, layout.cells_w(), layout.cells_h()));

    std::vector<const Candidate*> far;
    for (const auto& c : candidates) {
      if (c.dist >= min_negative_offset_px) far.push_back(&c);
    }
    // Half of the negatives are near misses to sharpen localization.
    std::vector<const Candidate*> near;
    for (const auto* c : far) {
      if (c->dist < 4.0 * min_negative_offset_px) near.push_back(c);
    }
    for (int k = 0; k < negatives_per_frame && !far.empty(); ++k) {
      const auto& pool = (k % 2 == 0 && !near.empty()) ? near : far;
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      const Candidate* c = pool[pick(rng)];
      out.negatives.push_back(grids[c->level].window(c->cx, c->cy, layout.cells_w(), layout.cells_h()));
    }
  }
  return out;
}

LinearDetector train_detector_on_frames(std::span<const Frame> frames, const VirtualCamera& camera,
                                        const HeadPhantom& phantom, const LinearDetector& layout,
                                        const FrameTrainOptions& options, FrameTrainReport* report) {
  if (options.mining_rounds < 0 || options.hard_negatives_per_frame < 0) {
    throw ValidationError("mining rounds and hard negatives per frame must be >= 0");
  }
  WindowSet windows = collect_windows(frames, camera, phantom, layout, options.negatives_per_frame,
                                      options.min_negative_offset_px, options.seed);
  DetectorTrainReport fit;
  LinearDetector det = train_detector(windows.positives, windows.negatives, layout, options.fit, &fit);
  std::vector<std::size_t> added;
  const int step = layout.stride / layout.hog.cell;
  for (int round = 0; round < options.mining_rounds; ++round) {
    std::size_t count = 0;
    for (const auto& frame : frames) {
      const Roi target = oracle_roi(camera, frame.ground_truth, phantom);
      const auto pyramid = build_pyramid(gray_from(frame, layout.channel), layout);
      struct Hard {
        double score;
        std::size_t level;
        int cx, cy;
      };
      std::vector<Hard> hard;
      std::vector<HogBlockGrid> grids;
      for (std::size_t l = 0; l < pyramid.size(); ++l) {
        grids.emplace_back(pyramid[l].image, layout.hog);
        for (int cy = 0; cy + layout.cells_h() <= grids[l].cells_y(); cy += step) {
          for (int cx = 0; cx + layout.cells_w() <= grids[l].cells_x(); cx += step) {
            const double sc = det.bias + grids[l].score(cx, cy, layout.cells_w(), layout.cells_h(), det.weights);
            if (sc < det.threshold) continue;
            const Roi w = window_roi(pyramid[l], layout, cx, cy, sc);
            if (std::hypot(w.center_u - target.center_u, w.center_v - target.center_v) < options.min_negative_offset_px) {
              continue;
            }
            hard.push_back({sc, l, cx, cy});
          }
        }
      }
      std::sort(hard.begin(), hard.end(), [](const Hard& a, const Hard& b) {
        return a.score > b.score ||
               (a.score == b.score && std::tie(a.level, a.cy, a.cx) < std::tie(b.level, b.cy, b.cx));
      });
      const std::size_t take = std::min<std::size_t>(hard.size(), options.hard_negatives_per_frame);
      for (std::size_t k = 0; k < take; ++k) {
        windows.negatives.push_back(
            grids[hard[k].level].window(hard[k].cx, hard[k].cy, layout.cells_w(), layout.cells_h()));
      }
      count += take;
    }
    added.push_back(count);
    if (count == 0) break;
    det = train_detector(windows.positives, windows.negatives, layout, options.fit, &fit);
  }
  if (report) {
    report->fit = fit;
    report->hard_negatives_added = added;
  }
  return det;
}

}  // namespace headpose
