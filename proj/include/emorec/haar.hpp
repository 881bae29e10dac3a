#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace emorec {

// ---------------------------------------------------------------------------
// Integral images
// ---------------------------------------------------------------------------

/// Prefix-sum tables sized (width+1) x (height+1); sums[0][*] = sums[*][0] = 0.
/// squared_sums carries the same layout for variance normalization.
struct IntegralImage {
  int width = 0;
  int height = 0;
  std::vector<double> sums;
  std::vector<double> squared_sums;

  double sum_at(int x, int y) const { return sums[static_cast<size_t>(y) * (width + 1) + x]; }
  double sq_at(int x, int y) const { return squared_sums[static_cast<size_t>(y) * (width + 1) + x]; }
};

inline IntegralImage integral_image(const Tensor& gray) {
  if (gray.rank() != 2) throw ShapeError("integral_image: expected rank-2 image");
  const int h = static_cast<int>(gray.dims[0]);
  const int w = static_cast<int>(gray.dims[1]);
  if (h < 1 || w < 1) throw ShapeError("integral_image: empty image");
  IntegralImage ii;
  ii.width = w;
  ii.height = h;
  ii.sums.assign(static_cast<size_t>(w + 1) * (h + 1), 0.0);
  ii.squared_sums.assign(static_cast<size_t>(w + 1) * (h + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0, row_sq = 0.0;
    for (int x = 0; x < w; ++x) {
      const double v = gray.at(y, x);
      row += v;
      row_sq += v * v;
      ii.sums[static_cast<size_t>(y + 1) * (w + 1) + x + 1] =
          ii.sums[static_cast<size_t>(y) * (w + 1) + x + 1] + row;
      ii.squared_sums[static_cast<size_t>(y + 1) * (w + 1) + x + 1] =
          ii.squared_sums[static_cast<size_t>(y) * (w + 1) + x + 1] + row_sq;
    }
  }
  return ii;
}

inline double rect_sum(const IntegralImage& ii, int x, int y, int w, int h) {
  if (w < 1 || h < 1 || x < 0 || y < 0 || x + w > ii.width || y + h > ii.height)
    throw BoundsError("rect_sum: rect (" + std::to_string(x) + "," + std::to_string(y) + "," +
                      std::to_string(w) + "," + std::to_string(h) + ") outside " +
                      std::to_string(ii.width) + "x" + std::to_string(ii.height));
  return ii.sum_at(x + w, y + h) - ii.sum_at(x + w, y) - ii.sum_at(x, y + h) + ii.sum_at(x, y);
}

inline double rect_sum_sq(const IntegralImage& ii, int x, int y, int w, int h) {
  if (w < 1 || h < 1 || x < 0 || y < 0 || x + w > ii.width || y + h > ii.height)
    throw BoundsError("rect_sum_sq: rect outside image");
  return ii.sq_at(x + w, y + h) - ii.sq_at(x + w, y) - ii.sq_at(x, y + h) + ii.sq_at(x, y);
}

// ---------------------------------------------------------------------------
// Cascade structures
// ---------------------------------------------------------------------------

struct HaarRect {
  int x = 0, y = 0, w = 0, h = 0;
  double weight = 0.0;
};

struct HaarFeature {
  std::vector<HaarRect> rects;  // 2-3 entries, base-window coordinates
};

struct Stump {
  HaarFeature feature;
  double threshold = 0.0;
  double left_value = 0.0;   // taken when feature sum < threshold * norm * area
  double right_value = 0.0;  // otherwise
};

struct CascadeStage {
  std::vector<Stump> stumps;
  double stage_threshold = 0.0;
};

struct Cascade {
  int base_width = 0;
  int base_height = 0;
  std::vector<CascadeStage> stages;
};

struct DetectionBox {
  int x = 0, y = 0, w = 0, h = 0;
  int neighbors = 0;
};

// ---------------------------------------------------------------------------
// Window evaluation
// ---------------------------------------------------------------------------

/// A window at (x,y) with size round(base*scale) passes when every stage's
/// stump-value sum reaches the stage threshold. Each stump compares its
/// weighted rect sum (rects scaled by `scale`, rounded to integer pixels and
/// clipped to the window) against threshold * norm * area, where norm is the
/// window standard deviation clamped to >= 1 and area the window pixel count.
/// Rounding skews the rect areas at fractional scales, so the first rect's
/// weight is recomputed per window to keep the weighted areas summing to
/// zero; a constant window then always has feature sum 0.
inline bool eval_window(const Cascade& cascade, const IntegralImage& ii, int x, int y,
                        double scale) {
  const int w = static_cast<int>(std::lround(cascade.base_width * scale));
  const int h = static_cast<int>(std::lround(cascade.base_height * scale));
  if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > ii.width || y + h > ii.height)
    throw BoundsError("eval_window: window (" + std::to_string(x) + "," + std::to_string(y) + "," +
                      std::to_string(w) + "," + std::to_string(h) + ") outside image");
  const double area = static_cast<double>(w) * h;
  const double mean = rect_sum(ii, x, y, w, h) / area;
  const double var = rect_sum_sq(ii, x, y, w, h) / area - mean * mean;
  const double norm = std::max(1.0, std::sqrt(std::max(0.0, var)));
  for (const auto& stage : cascade.stages) {
    double score = 0.0;
    for (const auto& stump : stage.stumps) {
      double fsum = 0.0;
      double first_sum = 0.0, first_area = 0.0, rest_weighted_area = 0.0;
      bool first = true;
      for (const auto& r : stump.feature.rects) {
        int rx = static_cast<int>(std::lround(r.x * scale));
        int ry = static_cast<int>(std::lround(r.y * scale));
        int rw = std::max(1, static_cast<int>(std::lround(r.w * scale)));
        int rh = std::max(1, static_cast<int>(std::lround(r.h * scale)));
        // rounding can push a scaled rect past the window edge; clip
        rx = std::min(rx, w - 1);
        ry = std::min(ry, h - 1);
        rw = std::min(rw, w - rx);
        rh = std::min(rh, h - ry);
        const double s = rect_sum(ii, x + rx, y + ry, rw, rh);
        if (first) {
          first_sum = s;
          first_area = static_cast<double>(rw) * rh;
          first = false;
        } else {
          fsum += r.weight * s;
          rest_weighted_area += r.weight * static_cast<double>(rw) * rh;
        }
      }
      fsum += -rest_weighted_area / first_area * first_sum;
      score += fsum < stump.threshold * norm * area ? stump.left_value : stump.right_value;
    }
    if (score < stage.stage_threshold) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Grouping and multi-scale search
// ---------------------------------------------------------------------------

/// Clusters boxes by similarity (every edge delta within eps times the
/// smaller box dimension, transitively), keeps clusters with more than
/// min_neighbors members and emits their coordinate-wise rounded mean.
inline std::vector<DetectionBox> group_rectangles(const std::vector<DetectionBox>& boxes,
                                                  int min_neighbors, double eps) {
  if (eps < 0.0) throw ParamError("group_rectangles: eps must be >= 0");
  const size_t n = boxes.size();
  std::vector<size_t> parent(n);
  std::iota(parent.begin(), parent.end(), size_t{0});
  auto find = [&](size_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  };
  auto similar = [&](const DetectionBox& a, const DetectionBox& b) {
    const double limit =
        eps * static_cast<double>(std::min({a.w, a.h, b.w, b.h}));
    return std::abs(a.x - b.x) <= limit && std::abs(a.y - b.y) <= limit &&
           std::abs((a.x + a.w) - (b.x + b.w)) <= limit &&
           std::abs((a.y + a.h) - (b.y + b.h)) <= limit;
  };
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j)
      if (similar(boxes[i], boxes[j])) parent[find(i)] = find(j);
  // gather clusters keyed by smallest member index, keeping input order
  std::vector<DetectionBox> out;
  std::vector<bool> seen(n, false);
  for (size_t i = 0; i < n; ++i) {
    const size_t root = find(i);
    if (seen[root]) continue;
    seen[root] = true;
    int64_t sx = 0, sy = 0, sw = 0, sh = 0;
    int count = 0;
    for (size_t j = 0; j < n; ++j) {
      if (find(j) != root) continue;
      sx += boxes[j].x;
      sy += boxes[j].y;
      sw += boxes[j].w;
      sh += boxes[j].h;
      ++count;
    }
    if (count <= min_neighbors) continue;
    DetectionBox b;
    b.x = static_cast<int>(std::lround(static_cast<double>(sx) / count));
    b.y = static_cast<int>(std::lround(static_cast<double>(sy) / count));
    b.w = static_cast<int>(std::lround(static_cast<double>(sw) / count));
    b.h = static_cast<int>(std::lround(static_cast<double>(sh) / count));
    b.neighbors = count;
    out.push_back(b);
  }
  return out;
}

/// Sliding-window pyramid search. Scales start where the scaled window's
/// smaller side reaches min_size and grow by scale_factor until the window
/// no longer fits; stride is max(1, round(scale)). Output is grouped and
/// sorted by (y, x, w) so repeated runs are bitwise identical.
inline std::vector<DetectionBox> detect_multiscale(const Cascade& cascade, const Tensor& gray,
                                                   double scale_factor, int min_neighbors,
                                                   int min_size, double eps = 0.2) {
  if (scale_factor <= 1.0) throw ParamError("detect_multiscale: scale_factor must be > 1");
  const int base_min = std::min(cascade.base_width, cascade.base_height);
  if (min_size < base_min)
    throw ParamError("detect_multiscale: min_size " + std::to_string(min_size) +
                     " below cascade base " + std::to_string(base_min));
  const IntegralImage ii = integral_image(gray);
  std::vector<DetectionBox> hits;
  for (double scale = static_cast<double>(min_size) / base_min;; scale *= scale_factor) {
    const int w = static_cast<int>(std::lround(cascade.base_width * scale));
    const int h = static_cast<int>(std::lround(cascade.base_height * scale));
    if (w > ii.width || h > ii.height) break;
    const int stride = std::max(1, static_cast<int>(std::lround(scale)));
    for (int y = 0; y + h <= ii.height; y += stride)
      for (int x = 0; x + w <= ii.width; x += stride)
        if (eval_window(cascade, ii, x, y, scale)) hits.push_back({x, y, w, h, 0});
  }
  std::vector<DetectionBox> grouped = group_rectangles(hits, min_neighbors, eps);
  for (auto& b : grouped) {
    // averaged rounding can overshoot the border by a pixel
    b.w = std::min(b.w, ii.width);
    b.h = std::min(b.h, ii.height);
    b.x = std::clamp(b.x, 0, ii.width - b.w);
    b.y = std::clamp(b.y, 0, ii.height - b.h);
  }
  std::sort(grouped.begin(), grouped.end(), [](const DetectionBox& a, const DetectionBox& b) {
    if (a.y != b.y) return a.y < b.y;
    if (a.x != b.x) return a.x < b.x;
    return a.w < b.w;
  });
  return grouped;
}

// ---------------------------------------------------------------------------
// Cascade XML import
// ---------------------------------------------------------------------------

namespace detail {

struct XmlNode {
  std::string name;
  std::string text;
  std::vector<XmlNode> children;

  const XmlNode* child(const std::string& n) const {
    for (const auto& c : children)
      if (c.name == n) return &c;
    return nullptr;
  }
};

inline void xml_skip_ws(const std::string& s, size_t& pos) {
  while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
}

inline std::string xml_decode(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '&') {
      out += s[i];
      continue;
    }
    if (s.compare(i, 4, "&lt;") == 0) { out += '<'; i += 3; }
    else if (s.compare(i, 4, "&gt;") == 0) { out += '>'; i += 3; }
    else if (s.compare(i, 5, "&amp;") == 0) { out += '&'; i += 4; }
    else if (s.compare(i, 6, "&quot;") == 0) { out += '"'; i += 5; }
    else if (s.compare(i, 6, "&apos;") == 0) { out += '\''; i += 5; }
    else out += s[i];
  }
  return out;
}

// Minimal element-tree reader for the legacy cascade interchange files:
// elements, text, comments, and declarations; attributes are skipped.
inline XmlNode xml_parse_element(const std::string& s, size_t& pos) {
  if (pos >= s.size() || s[pos] != '<') throw ImportError("xml: expected '<' at byte " + std::to_string(pos));
  ++pos;
  XmlNode node;
  while (pos < s.size() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_' ||
                            s[pos] == '-' || s[pos] == ':' || s[pos] == '.'))
    node.name += s[pos++];
  if (node.name.empty()) throw ImportError("xml: empty tag name at byte " + std::to_string(pos));
  // skip attributes up to '>' or '/>'
  while (pos < s.size() && s[pos] != '>') {
    if (s[pos] == '/' && pos + 1 < s.size() && s[pos + 1] == '>') {
      pos += 2;
      return node;
    }
    ++pos;
  }
  if (pos >= s.size()) throw ImportError("xml: unterminated tag <" + node.name + ">");
  ++pos;  // past '>'
  for (;;) {
    if (pos >= s.size()) throw ImportError("xml: missing closing tag for <" + node.name + ">");
    if (s[pos] == '<') {
      if (s.compare(pos, 4, "<!--") == 0) {
        const size_t end = s.find("-->", pos + 4);
        if (end == std::string::npos) throw ImportError("xml: unterminated comment");
        pos = end + 3;
        continue;
      }
      if (s.compare(pos, 2, "</") == 0) {
        pos += 2;
        std::string close;
        while (pos < s.size() && s[pos] != '>')
          close += s[pos++];
        if (pos >= s.size()) throw ImportError("xml: unterminated closing tag");
        ++pos;
        // trim
        while (!close.empty() && std::isspace(static_cast<unsigned char>(close.back()))) close.pop_back();
        if (close != node.name)
          throw ImportError("xml: mismatched closing tag </" + close + "> for <" + node.name + ">");
        return node;
      }
      node.children.push_back(xml_parse_element(s, pos));
    } else {
      node.text += s[pos++];
    }
  }
}

inline XmlNode xml_parse(const std::string& text) {
  size_t pos = 0;
  for (;;) {
    xml_skip_ws(text, pos);
    if (pos + 1 < text.size() && text[pos] == '<' &&
        (text[pos + 1] == '?' || text[pos + 1] == '!')) {
      if (text.compare(pos, 4, "<!--") == 0) {
        const size_t end = text.find("-->", pos + 4);
        if (end == std::string::npos) throw ImportError("xml: unterminated comment");
        pos = end + 3;
      } else {
        const size_t end = text.find('>', pos);
        if (end == std::string::npos) throw ImportError("xml: unterminated declaration");
        pos = end + 1;
      }
      continue;
    }
    break;
  }
  if (pos >= text.size() || text[pos] != '<')
    throw ImportError("xml: no root element found");
  XmlNode root = xml_parse_element(text, pos);
  xml_skip_ws(text, pos);
  if (pos != text.size())
    throw ImportError("xml: trailing content after root element");
  return root;
}

inline double parse_real(const std::string& raw, const std::string& what) {
  std::istringstream in(xml_decode(raw));
  double v = 0.0;
  if (!(in >> v)) throw ImportError("cascade import: cannot parse number in " + what);
  std::string rest;
  if (in >> rest) throw ImportError("cascade import: trailing content in " + what);
  return v;
}

// DFS for the element that owns the <size> child; that node is the cascade.
inline const XmlNode* find_cascade_node(const XmlNode& node) {
  if (node.child("size")) return &node;
  for (const auto& c : node.children)
    if (const XmlNode* found = find_cascade_node(c)) return found;
  return nullptr;
}

// A tree node is the stump itself when it carries <feature>; legacy files
// nest the stump one level down inside the tree element.
inline const XmlNode* find_stump_node(const XmlNode& tree) {
  if (tree.child("feature")) return &tree;
  for (const auto& c : tree.children)
    if (c.child("feature")) return &c;
  return nullptr;
}

}  // namespace detail

inline Cascade import_cascade(const std::string& xml_text,
                              std::vector<std::string>* warnings = nullptr) {
  const detail::XmlNode root = detail::xml_parse(xml_text);
  const detail::XmlNode* cascade_node = detail::find_cascade_node(root);
  if (!cascade_node) throw ImportError("cascade import: missing <size> element");
  std::istringstream size_in(cascade_node->child("size")->text);
  Cascade cascade;
  if (!(size_in >> cascade.base_width >> cascade.base_height))
    throw ImportError("cascade import: cannot parse <size>");
  if (cascade.base_width < 4 || cascade.base_height < 4)
    throw ImportError("cascade import: base window below 4x4 in <size>");
  const detail::XmlNode* stages_node = cascade_node->child("stages");
  if (!stages_node) throw ImportError("cascade import: missing <stages> element");
  int stage_idx = 0;
  for (const auto& stage_node : stages_node->children) {
    CascadeStage stage;
    const std::string where = "stage " + std::to_string(stage_idx);
    const detail::XmlNode* thr = stage_node.child("stage_threshold");
    if (!thr) throw ImportError("cascade import: missing <stage_threshold> in " + where);
    stage.stage_threshold = detail::parse_real(thr->text, "<stage_threshold> of " + where);
    const detail::XmlNode* trees = stage_node.child("trees");
    if (!trees) throw ImportError("cascade import: missing <trees> in " + where);
    int tree_idx = 0;
    for (const auto& tree : trees->children) {
      const std::string twhere = where + ", tree " + std::to_string(tree_idx);
      const detail::XmlNode* stump_node = detail::find_stump_node(tree);
      if (!stump_node) throw ImportError("cascade import: missing <feature> in " + twhere);
      Stump stump;
      const detail::XmlNode* feature = stump_node->child("feature");
      const detail::XmlNode* rects = feature->child("rects");
      if (!rects) throw ImportError("cascade import: missing <rects> in " + twhere);
      if (const detail::XmlNode* tilted = feature->child("tilted");
          tilted && detail::parse_real(tilted->text, "<tilted> of " + twhere) != 0.0)
        throw ImportError("cascade import: tilted features unsupported in " + twhere);
      double weighted_area = 0.0;
      for (const auto& rect_node : rects->children) {
        HaarRect r;
        std::istringstream rin(detail::xml_decode(rect_node.text));
        if (!(rin >> r.x >> r.y >> r.w >> r.h >> r.weight))
          throw ImportError("cascade import: cannot parse rect in " + twhere);
        if (r.w < 1 || r.h < 1 || r.x < 0 || r.y < 0 || r.x + r.w > cascade.base_width ||
            r.y + r.h > cascade.base_height)
          throw ImportError("cascade import: rect outside base window in " + twhere);
        weighted_area += static_cast<double>(r.w) * r.h * r.weight;
        stump.feature.rects.push_back(r);
      }
      if (stump.feature.rects.size() < 2 || stump.feature.rects.size() > 3)
        throw ImportError("cascade import: expected 2-3 rects in " + twhere + ", got " +
                          std::to_string(stump.feature.rects.size()));
      if (warnings && std::abs(weighted_area) > 1e-3)
        warnings->push_back("feature weighted area sums to " + std::to_string(weighted_area) +
                            " in " + twhere);
      const detail::XmlNode* threshold = stump_node->child("threshold");
      const detail::XmlNode* left = stump_node->child("left_val");
      const detail::XmlNode* right = stump_node->child("right_val");
      if (!threshold) throw ImportError("cascade import: missing <threshold> in " + twhere);
      if (!left) throw ImportError("cascade import: missing <left_val> in " + twhere);
      if (!right) throw ImportError("cascade import: missing <right_val> in " + twhere);
      stump.threshold = detail::parse_real(threshold->text, "<threshold> of " + twhere);
      stump.left_value = detail::parse_real(left->text, "<left_val> of " + twhere);
      stump.right_value = detail::parse_real(right->text, "<right_val> of " + twhere);
      stage.stumps.push_back(std::move(stump));
      ++tree_idx;
    }
    if (stage.stumps.empty())
      throw ImportError("cascade import: no stumps in " + where);
    cascade.stages.push_back(std::move(stage));
    ++stage_idx;
  }
  if (cascade.stages.empty()) throw ImportError("cascade import: empty <stages>");
  return cascade;
}

inline Cascade import_cascade_file(const std::string& path,
                                   std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImportError("cannot read cascade " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return import_cascade(buf.str(), warnings);
  } catch (const ImportError& e) {
    throw ImportError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Mouth ROI extraction
// ---------------------------------------------------------------------------

struct DetectParams {
  double scale_factor = 1.1;
  int min_neighbors = 3;
  int min_size = 0;  // 0: use the mouth cascade's base size
  double eps = 0.2;
};

inline Tensor crop(const Tensor& gray, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > gray.dims[1] || y + h > gray.dims[0])
    throw BoundsError("crop: rect outside image");
  Tensor out({h, w}, 0.0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = gray.at(y + i, x + j);
  return out;
}

/// Searches the lower half of the face box with the mouth cascade and crops
/// the detection with the most neighbors (ties: topmost, then leftmost).
/// With no detection the fallback region is used: lower third of the face
/// box, 60% of the face width, centered horizontally.
inline Tensor extract_mouth_roi(const Tensor& gray, const DetectionBox& face,
                                const Cascade& mouth_cascade, const DetectParams& params,
                                DetectionBox* roi_out = nullptr, bool* used_fallback = nullptr) {
  if (face.x < 0 || face.y < 0 || face.w < 1 || face.h < 1 || face.x + face.w > gray.dims[1] ||
      face.y + face.h > gray.dims[0])
    throw BoundsError("extract_mouth_roi: face box outside image");
  const int half_y = face.y + face.h / 2;
  const int half_h = face.h - face.h / 2;
  DetectionBox best{0, 0, 0, 0, -1};
  if (half_h >= 1 && face.w >= 1) {
    const Tensor lower = crop(gray, face.x, half_y, face.w, half_h);
    const int min_size = params.min_size > 0
                             ? params.min_size
                             : std::min(mouth_cascade.base_width, mouth_cascade.base_height);
    std::vector<DetectionBox> hits;
    if (std::min(mouth_cascade.base_width, mouth_cascade.base_height) <= std::min(face.w, half_h))
      hits = detect_multiscale(mouth_cascade, lower, params.scale_factor, params.min_neighbors,
                               min_size, params.eps);
    for (const auto& d : hits) {
      // boxes arrive sorted by (y, x, w): the first strictly-better neighbor
      // count wins, which realizes topmost-then-leftmost tie-breaking
      if (d.neighbors > best.neighbors) best = d;
    }
    if (best.neighbors >= 0) {
      best.x += face.x;
      best.y += half_y;
    }
  }
  if (best.neighbors < 0) {
    DetectionBox fb;
    fb.y = face.y + (2 * face.h) / 3;
    fb.h = face.h - (2 * face.h) / 3;
    fb.w = std::max(1, static_cast<int>(std::lround(0.6 * face.w)));
    fb.x = face.x + (face.w - fb.w) / 2;
    fb.neighbors = 0;
    best = fb;
    if (used_fallback) *used_fallback = true;
  } else if (used_fallback) {
    *used_fallback = false;
  }
  if (roi_out) *roi_out = best;
  return crop(gray, best.x, best.y, best.w, best.h);
}

}  // namespace emorec
