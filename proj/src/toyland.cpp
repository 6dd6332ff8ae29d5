#include "nfcs/toyland.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace nfcs {

namespace {

// shape rasterizers return true when the pixel center lies inside
struct ShapeSpec {
  int kind;  // 0 disc, 1 square, 2 triangle (class_id mod 3 picks a shape)
  float cx, cy, size;
};

bool inside_shape(const ShapeSpec& s, float px, float py) {
  switch (s.kind) {
    case 0: {
      float r = s.size * 0.5f;
      float dx = px - s.cx, dy = py - s.cy;
      return dx * dx + dy * dy <= r * r;
    }
    case 1:
      return std::abs(px - s.cx) <= s.size * 0.5f &&
             std::abs(py - s.cy) <= s.size * 0.5f;
    default: {
      // upright isoceles triangle, base = height = size
      float half = s.size * 0.5f;
      float top = s.cy - half, bottom = s.cy + half;
      if (py < top || py > bottom) return false;
      float frac = (py - top) / s.size;  // 0 at apex, 1 at base
      return std::abs(px - s.cx) <= frac * half;
    }
  }
}

}  // namespace

std::vector<SynthImage> generate_dataset(uint64_t seed, int n_images,
                                         int image_size, int num_classes) {
  NFCS_REQUIRE(n_images >= 1, "need at least one image");
  NFCS_REQUIRE(image_size >= 32, "image size too small");
  NFCS_REQUIRE(num_classes >= 1, "need at least one class");
  std::vector<SynthImage> out;
  out.reserve(static_cast<size_t>(n_images));
  const float palette[3][3] = {{0.85f, 0.25f, 0.2f},
                               {0.2f, 0.8f, 0.3f},
                               {0.25f, 0.35f, 0.9f}};
  for (int idx = 0; idx < n_images; idx++) {
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(idx)));
    SynthImage img;
    img.pixels = Tensor::zeros({3, image_size, image_size});
    float base[3];
    for (float& b : base) b = static_cast<float>(rng.uniform(0.25, 0.65));
    for (int c = 0; c < 3; c++)
      for (int y = 0; y < image_size; y++)
        for (int x = 0; x < image_size; x++)
          img.pixels[(static_cast<size_t>(c) * image_size + y) * image_size + x] =
              base[c] + static_cast<float>(rng.uniform(-0.08, 0.08));

    int n_objects = 1 + static_cast<int>(rng.bounded(3));
    for (int o = 0; o < n_objects; o++) {
      int class_id = static_cast<int>(rng.bounded(static_cast<uint32_t>(num_classes)));
      // log-uniform sizes spread objects across the assignment ranges
      float max_side = static_cast<float>(image_size) - 8.0f;
      float size = static_cast<float>(6.0 * std::exp(rng.uniform() * std::log(max_side / 6.0)));
      float half = size * 0.5f;
      float cx = static_cast<float>(rng.uniform(half + 1.0, image_size - half - 1.0));
      float cy = static_cast<float>(rng.uniform(half + 1.0, image_size - half - 1.0));
      ShapeSpec shape{class_id % 3, cx, cy, size};

      int min_x = image_size, min_y = image_size, max_x = -1, max_y = -1;
      float color[3];
      for (int c = 0; c < 3; c++)
        color[c] = std::clamp(
            palette[class_id % 3][c] + static_cast<float>(rng.uniform(-0.1, 0.1)),
            0.0f, 1.0f);
      for (int y = 0; y < image_size; y++)
        for (int x = 0; x < image_size; x++) {
          if (!inside_shape(shape, static_cast<float>(x) + 0.5f,
                            static_cast<float>(y) + 0.5f))
            continue;
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min(min_y, y);
          max_y = std::max(max_y, y);
          for (int c = 0; c < 3; c++)
            img.pixels[(static_cast<size_t>(c) * image_size + y) * image_size + x] = color[c];
        }
      if (max_x < 0) continue;  // degenerate raster, skip the object
      // box from the rendered mask keeps annotation and pixels consistent
      img.objects.push_back({class_id, static_cast<float>(min_x),
                             static_cast<float>(min_y), static_cast<float>(max_x + 1),
                             static_cast<float>(max_y + 1)});
    }
    if (img.objects.empty()) {
      // guarantee at least one object: a centered square of a safe size
      int class_id = static_cast<int>(rng.bounded(static_cast<uint32_t>(num_classes)));
      float half = static_cast<float>(image_size) / 8.0f;
      float c0 = static_cast<float>(image_size) / 2.0f;
      ShapeSpec shape{1, c0, c0, half * 2.0f};
      for (int y = 0; y < image_size; y++)
        for (int x = 0; x < image_size; x++)
          if (inside_shape(shape, static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f))
            for (int c = 0; c < 3; c++)
              img.pixels[(static_cast<size_t>(c) * image_size + y) * image_size + x] = 0.9f;
      img.objects.push_back({class_id, c0 - half, c0 - half, c0 + half, c0 + half});
    }
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset cache

static constexpr uint32_t kDatasetVersion = 1;

void save_dataset(const std::vector<SynthImage>& data, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  NFCS_REQUIRE(f.good(), "cannot open '", path, "' for writing");
  auto put_u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  f.write("NFDS", 4);
  put_u32(kDatasetVersion);
  put_u32(static_cast<uint32_t>(data.size()));
  for (const SynthImage& img : data) {
    put_u32(static_cast<uint32_t>(img.pixels.dim(1)));
    put_u32(static_cast<uint32_t>(img.pixels.dim(2)));
    f.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.numel() * sizeof(float)));
    put_u32(static_cast<uint32_t>(img.objects.size()));
    for (const ObjectAnnotation& o : img.objects) {
      put_u32(static_cast<uint32_t>(o.class_id));
      float box[4] = {o.x1, o.y1, o.x2, o.y2};
      f.write(reinterpret_cast<const char*>(box), sizeof(box));
    }
  }
  NFCS_REQUIRE(f.good(), "dataset write failed");
}

std::vector<SynthImage> load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  NFCS_REQUIRE(f.good(), "cannot open dataset '", path, "'");
  char magic[4];
  f.read(magic, 4);
  NFCS_REQUIRE(f.good() && std::string(magic, 4) == "NFDS", "'", path,
               "' is not a dataset cache");
  auto get_u32 = [&] {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  uint32_t version = get_u32();
  NFCS_REQUIRE(version == kDatasetVersion, "unsupported dataset version ", version);
  uint32_t n = get_u32();
  std::vector<SynthImage> out(n);
  for (SynthImage& img : out) {
    int h = static_cast<int>(get_u32());
    int w = static_cast<int>(get_u32());
    img.pixels = Tensor::zeros({3, h, w});
    f.read(reinterpret_cast<char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.numel() * sizeof(float)));
    uint32_t objs = get_u32();
    img.objects.resize(objs);
    for (ObjectAnnotation& o : img.objects) {
      o.class_id = static_cast<int>(get_u32());
      float box[4];
      f.read(reinterpret_cast<char*>(box), sizeof(box));
      o.x1 = box[0];
      o.y1 = box[1];
      o.x2 = box[2];
      o.y2 = box[3];
    }
    NFCS_REQUIRE(f.good(), "truncated dataset cache");
  }
  return out;
}

std::string annotations_json(const std::vector<SynthImage>& data) {
  nlohmann::json root = nlohmann::json::array();
  for (size_t i = 0; i < data.size(); i++) {
    nlohmann::json objs = nlohmann::json::array();
    for (const ObjectAnnotation& o : data[i].objects)
      objs.push_back({{"class", o.class_id},
                      {"box", {o.x1, o.y1, o.x2, o.y2}}});
    root.push_back({{"image", i}, {"objects", objs}});
  }
  return root.dump(2);
}

// ---------------------------------------------------------------------------
// target encoding

std::array<LevelRange, kNumLevels> toy_level_ranges() {
  return {{{0.f, 16.f}, {16.f, 32.f}, {32.f, 64.f}, {64.f, 128.f},
           {128.f, std::numeric_limits<float>::infinity()}}};
}

PyramidTargets encode_targets(const SynthImage& image,
                              const std::array<FeatureSpec, kNumLevels>& levels,
                              const std::array<LevelRange, kNumLevels>& ranges,
                              int num_classes) {
  PyramidTargets out;
  for (const ObjectAnnotation& o : image.objects)
    NFCS_REQUIRE(o.class_id < num_classes, "object class ", o.class_id,
                 " outside the configured ", num_classes, " classes");

  for (int l = 0; l < kNumLevels; l++) {
    const FeatureSpec& spec = levels[static_cast<size_t>(l)];
    const LevelRange& range = ranges[static_cast<size_t>(l)];
    auto& tl = out.levels[static_cast<size_t>(l)];
    tl.stride = spec.stride;
    tl.cls = Tensor::zeros({num_classes, spec.height, spec.width});
    tl.reg = Tensor::zeros({4, spec.height, spec.width});
    tl.ctr = Tensor::zeros({1, spec.height, spec.width});
    tl.pos = Tensor::zeros({1, spec.height, spec.width});
    float s = static_cast<float>(spec.stride);
    for (int iy = 0; iy < spec.height; iy++)
      for (int ix = 0; ix < spec.width; ix++) {
        float py = s * 0.5f + static_cast<float>(iy) * s;
        float px = s * 0.5f + static_cast<float>(ix) * s;
        const ObjectAnnotation* best = nullptr;
        float best_area = std::numeric_limits<float>::max();
        float bl = 0, bt = 0, br = 0, bb = 0;
        for (const ObjectAnnotation& o : image.objects) {
          float dl = px - o.x1, dt = py - o.y1, dr = o.x2 - px, db = o.y2 - py;
          if (dl <= 0 || dt <= 0 || dr <= 0 || db <= 0) continue;
          float m = std::max(std::max(dl, dr), std::max(dt, db));
          if (!(m > range.lo && m <= range.hi)) continue;
          if (o.area() < best_area) {
            best = &o;
            best_area = o.area();
            bl = dl;
            bt = dt;
            br = dr;
            bb = db;
          }
        }
        if (!best) continue;
        size_t pix = static_cast<size_t>(iy) * spec.width + ix;
        tl.cls[static_cast<size_t>(best->class_id) * spec.height * spec.width + pix] = 1.0f;
        size_t plane = static_cast<size_t>(spec.height) * spec.width;
        tl.reg[0 * plane + pix] = bl;
        tl.reg[1 * plane + pix] = bt;
        tl.reg[2 * plane + pix] = br;
        tl.reg[3 * plane + pix] = bb;
        float c = std::sqrt((std::min(bl, br) / std::max(bl, br)) *
                            (std::min(bt, bb) / std::max(bt, bb)));
        tl.ctr[pix] = c;
        tl.pos[pix] = 1.0f;
        out.num_pos++;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

LossValues build_losses(TapeF& tape,
                        const std::array<LevelPrediction, kNumLevels>& preds,
                        int batch_index, const PyramidTargets& targets,
                        const LossConfig& cfg) {
  using V = TapeF::Value;
  float inv_pos = 1.0f / static_cast<float>(std::max(targets.num_pos, 1));
  V cls_total = nullptr, reg_total = nullptr, ctr_total = nullptr;
  float lo = cfg.prob_eps, hi = 1.0f - cfg.prob_eps;

  for (int l = 0; l < kNumLevels; l++) {
    const auto& t = targets.levels[static_cast<size_t>(l)];
    const auto& pr = preds[static_cast<size_t>(l)];
    NFCS_REQUIRE(pr.cls->value.dim(1) == t.cls.dim(0) &&
                     pr.cls->value.dim(2) == t.cls.dim(1) &&
                     pr.cls->value.dim(3) == t.cls.dim(2),
                 "prediction/target shape mismatch on level ", l + 3);
    int k = t.cls.dim(0), h = t.cls.dim(1), w = t.cls.dim(2);

    V cls_logit = tape.slice_batch(pr.cls, batch_index);
    V reg_pred = tape.slice_batch(pr.reg, batch_index);
    V ctr_logit = tape.slice_batch(pr.ctr, batch_index);

    // focal over all locations and classes
    V tcls = tape.constant(t.cls.reshaped({1, k, h, w}));
    V p = tape.clamp(tape.sigmoid(cls_logit), lo, hi);
    V one_minus_p = tape.add_scalar(tape.mul_scalar(p, -1.0f), 1.0f);
    V log_p = tape.log(p);
    V log_1p = tape.log(one_minus_p);
    V pos_term = tape.mul_scalar(
        tape.mul(tape.pow_scalar(one_minus_p, cfg.focal_gamma), log_p),
        -cfg.focal_alpha);
    V neg_term = tape.mul_scalar(
        tape.mul(tape.pow_scalar(p, cfg.focal_gamma), log_1p),
        -(1.0f - cfg.focal_alpha));
    V one_minus_t = tape.add_scalar(tape.mul_scalar(tcls, -1.0f), 1.0f);
    V focal = tape.add(tape.mul(tcls, pos_term), tape.mul(one_minus_t, neg_term));
    V cls_loss = tape.sum(focal);
    cls_total = cls_total ? tape.add(cls_total, cls_loss) : cls_loss;

    if (targets.num_pos > 0) {
      V mask = tape.constant(t.pos.reshaped({1, 1, h, w}));
      // IoU of the predicted and target distance boxes at each location
      V tl_ = tape.constant(t.reg.reshaped({1, 4, h, w}));
      auto ch = [&](V x, int c) { return tape.slice_channels(x, c, c + 1); };
      V iw = tape.add(tape.minimum(ch(reg_pred, 0), ch(tl_, 0)),
                      tape.minimum(ch(reg_pred, 2), ch(tl_, 2)));
      V ih = tape.add(tape.minimum(ch(reg_pred, 1), ch(tl_, 1)),
                      tape.minimum(ch(reg_pred, 3), ch(tl_, 3)));
      V inter = tape.mul(iw, ih);
      V area_p = tape.mul(tape.add(ch(reg_pred, 0), ch(reg_pred, 2)),
                          tape.add(ch(reg_pred, 1), ch(reg_pred, 3)));
      V area_t = tape.mul(tape.add(ch(tl_, 0), ch(tl_, 2)),
                          tape.add(ch(tl_, 1), ch(tl_, 3)));
      V uni = tape.sub(tape.add(area_p, area_t), inter);
      V iou = tape.clamp(tape.div(inter, tape.maximum(uni, tape.constant(
                                              Tensor::full(uni->value.shape(), 1e-9f)))),
                         lo, 1.0f);
      V reg_loss = tape.sum(tape.mul(mask, tape.mul_scalar(tape.log(iou), -1.0f)));
      reg_total = reg_total ? tape.add(reg_total, reg_loss) : reg_loss;

      V tctr = tape.constant(t.ctr.reshaped({1, 1, h, w}));
      V cp = tape.clamp(tape.sigmoid(ctr_logit), lo, hi);
      V bce = tape.sub(tape.mul_scalar(tape.mul(tctr, tape.log(cp)), -1.0f),
                       tape.mul(tape.add_scalar(tape.mul_scalar(tctr, -1.0f), 1.0f),
                                tape.log(tape.add_scalar(tape.mul_scalar(cp, -1.0f), 1.0f))));
      V ctr_loss = tape.sum(tape.mul(mask, bce));
      ctr_total = ctr_total ? tape.add(ctr_total, ctr_loss) : ctr_loss;
    }
  }

  LossValues out;
  out.cls = tape.mul_scalar(cls_total, inv_pos);
  Tensor zero = Tensor::zeros({1});
  out.reg = reg_total ? tape.mul_scalar(reg_total, inv_pos) : tape.constant(zero.clone());
  out.ctr = ctr_total ? tape.mul_scalar(ctr_total, inv_pos) : tape.constant(zero.clone());
  out.total = tape.add(out.cls, tape.add(out.reg, out.ctr));
  return out;
}

// ---------------------------------------------------------------------------
// AP

float box_iou(float ax1, float ay1, float ax2, float ay2, float bx1, float by1,
              float bx2, float by2) {
  float iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  float ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return 0.0f;
  float inter = iw * ih;
  float uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

std::vector<Detection> decode_detections(
    const std::array<LevelPrediction, kNumLevels>& preds, int batch_index,
    int image_id, float score_thresh, float nms_iou, int image_size) {
  std::vector<Detection> raw;
  auto sig = [](float v) { return 1.0f / (1.0f + std::exp(-v)); };
  for (const LevelPrediction& pr : preds) {
    int k = pr.cls->value.dim(1), h = pr.cls->value.dim(2), w = pr.cls->value.dim(3);
    float s = static_cast<float>(pr.stride);
    for (int iy = 0; iy < h; iy++)
      for (int ix = 0; ix < w; ix++) {
        float py = s * 0.5f + static_cast<float>(iy) * s;
        float px = s * 0.5f + static_cast<float>(ix) * s;
        float ctr = sig(pr.ctr->value.at4(batch_index, 0, iy, ix));
        float dl = pr.reg->value.at4(batch_index, 0, iy, ix);
        float dt = pr.reg->value.at4(batch_index, 1, iy, ix);
        float dr = pr.reg->value.at4(batch_index, 2, iy, ix);
        float db = pr.reg->value.at4(batch_index, 3, iy, ix);
        for (int c = 0; c < k; c++) {
          float score = sig(pr.cls->value.at4(batch_index, c, iy, ix)) * ctr;
          if (score <= score_thresh) continue;
          Detection d;
          d.image_id = image_id;
          d.class_id = c;
          d.score = score;
          d.x1 = std::max(0.0f, px - dl);
          d.y1 = std::max(0.0f, py - dt);
          d.x2 = std::min(static_cast<float>(image_size), px + dr);
          d.y2 = std::min(static_cast<float>(image_size), py + db);
          if (d.x2 > d.x1 && d.y2 > d.y1) raw.push_back(d);
        }
      }
  }
  // greedy per-class NMS, ties broken by decode order for determinism
  std::stable_sort(raw.begin(), raw.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const Detection& d : raw) {
    bool suppressed = false;
    for (const Detection& k2 : kept) {
      if (k2.class_id != d.class_id) continue;
      if (box_iou(d.x1, d.y1, d.x2, d.y2, k2.x1, k2.y1, k2.x2, k2.y2) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

ApResult evaluate_ap(std::vector<Detection> detections,
                     const std::vector<const SynthImage*>& images,
                     int num_classes, float iou_thresh) {
  ApResult result;
  result.per_class.assign(static_cast<size_t>(num_classes), -1.0);
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });

  double mean_acc = 0;
  int mean_n = 0;
  for (int cls = 0; cls < num_classes; cls++) {
    int total_gt = 0;
    std::vector<std::vector<bool>> used(images.size());
    for (size_t i = 0; i < images.size(); i++) {
      used[i].assign(images[i]->objects.size(), false);
      for (const ObjectAnnotation& o : images[i]->objects)
        if (o.class_id == cls) total_gt++;
    }
    if (total_gt == 0) continue;

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const Detection& d : detections) {
      if (d.class_id != cls) continue;
      NFCS_REQUIRE(d.image_id >= 0 && d.image_id < static_cast<int>(images.size()),
                   "detection references unknown image ", d.image_id);
      const SynthImage& img = *images[static_cast<size_t>(d.image_id)];
      int best = -1;
      float best_iou = iou_thresh;
      for (size_t g = 0; g < img.objects.size(); g++) {
        const ObjectAnnotation& o = img.objects[g];
        if (o.class_id != cls || used[static_cast<size_t>(d.image_id)][g]) continue;
        float iou = box_iou(d.x1, d.y1, d.x2, d.y2, o.x1, o.y1, o.x2, o.y2);
        if (iou >= best_iou) {
          best_iou = iou;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        used[static_cast<size_t>(d.image_id)][static_cast<size_t>(best)] = true;
        tp++;
      } else {
        fp++;
      }
      precision.push_back(static_cast<double>(tp) / (tp + fp));
      recall.push_back(static_cast<double>(tp) / total_gt);
    }

    // 101-point interpolation
    double ap = 0;
    for (int r = 0; r <= 100; r++) {
      double rr = r / 100.0;
      double best_p = 0;
      for (size_t i = 0; i < recall.size(); i++)
        if (recall[i] >= rr) best_p = std::max(best_p, precision[i]);
      ap += best_p;
    }
    ap /= 101.0;
    result.per_class[static_cast<size_t>(cls)] = ap;
    mean_acc += ap;
    mean_n++;
  }
  result.mean = mean_n > 0 ? mean_acc / mean_n : 0.0;
  return result;
}

}  // namespace nfcs
