#include "nfcs/orchestrator.hpp"

#include <atomic>
#include <set>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

namespace nfcs {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// plan

PolicyConfig SearchPlan::policy() const {
  PolicyConfig p;
  p.hidden_size = ctrl_hidden;
  p.embedding_size = ctrl_embedding;
  p.clip_epsilon = static_cast<float>(ctrl_clip);
  p.ppo_epochs = ctrl_ppo_epochs;
  p.batch_archs = controller_batch;
  p.entropy_coef = static_cast<float>(ctrl_entropy);
  p.baseline_decay = static_cast<float>(ctrl_baseline_decay);
  p.lr = static_cast<float>(ctrl_lr);
  return p;
}

CompileOptions SearchPlan::compile_options() const {
  NFCS_REQUIRE(fpn_norm == "bn" || fpn_norm == "gn", "fpn_norm must be bn or gn");
  CompileOptions o;
  o.fpn_norm = fpn_norm == "bn" ? NormKind::Batch : NormKind::Group;
  return o;
}

nlohmann::json SearchPlan::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["n_images"] = n_images;
  j["image_size"] = image_size;
  j["num_classes"] = num_classes;
  j["train_fraction"] = train_fraction;
  j["proxy_iterations"] = proxy_iterations;
  j["proxy_batch"] = proxy_batch;
  j["adam_lr"] = adam_lr;
  j["polyak_decay"] = polyak_decay;
  j["fpn_width"] = fpn_width;
  j["head_width"] = head_width;
  j["fpn_norm"] = fpn_norm;
  j["backbone_iterations"] = backbone_iterations;
  j["backbone_batch"] = backbone_batch;
  j["backbone_lr"] = backbone_lr;
  j["archs_fpn"] = archs_fpn;
  j["archs_head"] = archs_head;
  j["controller_batch"] = controller_batch;
  j["top_k_fpn"] = top_k_fpn;
  j["top_k_head"] = top_k_head;
  j["reward_mode"] = reward_mode;
  j["space_mode"] = space_mode;
  j["score_thresh"] = score_thresh;
  j["nms_iou"] = nms_iou;
  j["ctrl_hidden"] = ctrl_hidden;
  j["ctrl_embedding"] = ctrl_embedding;
  j["ctrl_clip"] = ctrl_clip;
  j["ctrl_ppo_epochs"] = ctrl_ppo_epochs;
  j["ctrl_entropy"] = ctrl_entropy;
  j["ctrl_baseline_decay"] = ctrl_baseline_decay;
  j["ctrl_lr"] = ctrl_lr;
  return j;
}

SearchPlan SearchPlan::from_json(const nlohmann::json& j) {
  SearchPlan p;
  p.seed = j.value("seed", p.seed);
  p.n_images = j.value("n_images", p.n_images);
  p.image_size = j.value("image_size", p.image_size);
  p.num_classes = j.value("num_classes", p.num_classes);
  p.train_fraction = j.value("train_fraction", p.train_fraction);
  p.proxy_iterations = j.value("proxy_iterations", p.proxy_iterations);
  p.proxy_batch = j.value("proxy_batch", p.proxy_batch);
  p.adam_lr = j.value("adam_lr", p.adam_lr);
  p.polyak_decay = j.value("polyak_decay", p.polyak_decay);
  p.fpn_width = j.value("fpn_width", p.fpn_width);
  p.head_width = j.value("head_width", p.head_width);
  p.fpn_norm = j.value("fpn_norm", p.fpn_norm);
  p.backbone_iterations = j.value("backbone_iterations", p.backbone_iterations);
  p.backbone_batch = j.value("backbone_batch", p.backbone_batch);
  p.backbone_lr = j.value("backbone_lr", p.backbone_lr);
  p.archs_fpn = j.value("archs_fpn", p.archs_fpn);
  p.archs_head = j.value("archs_head", p.archs_head);
  p.controller_batch = j.value("controller_batch", p.controller_batch);
  p.top_k_fpn = j.value("top_k_fpn", p.top_k_fpn);
  p.top_k_head = j.value("top_k_head", p.top_k_head);
  p.reward_mode = j.value("reward_mode", p.reward_mode);
  p.space_mode = j.value("space_mode", p.space_mode);
  p.score_thresh = j.value("score_thresh", p.score_thresh);
  p.nms_iou = j.value("nms_iou", p.nms_iou);
  p.ctrl_hidden = j.value("ctrl_hidden", p.ctrl_hidden);
  p.ctrl_embedding = j.value("ctrl_embedding", p.ctrl_embedding);
  p.ctrl_clip = j.value("ctrl_clip", p.ctrl_clip);
  p.ctrl_ppo_epochs = j.value("ctrl_ppo_epochs", p.ctrl_ppo_epochs);
  p.ctrl_entropy = j.value("ctrl_entropy", p.ctrl_entropy);
  p.ctrl_baseline_decay = j.value("ctrl_baseline_decay", p.ctrl_baseline_decay);
  p.ctrl_lr = j.value("ctrl_lr", p.ctrl_lr);
  NFCS_REQUIRE(p.train_fraction > 0 && p.train_fraction < 1,
               "train_fraction must lie in (0,1)");
  NFCS_REQUIRE(p.fpn_width > 0 && p.head_width > 0, "widths must be positive");
  NFCS_REQUIRE(p.reward_mode == "negloss" || p.reward_mode == "toyap",
               "reward_mode must be negloss or toyap");
  NFCS_REQUIRE(p.space_mode == "f" || p.space_mode == "h" || p.space_mode == "fh",
               "space_mode must be f, h or fh");
  return p;
}

SearchPlan SearchPlan::load(const std::string& path) {
  std::ifstream f(path);
  NFCS_REQUIRE(f.good(), "cannot open plan '", path, "'");
  return from_json(nlohmann::json::parse(f));
}

static uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

static std::string hex64(uint64_t v) {
  char buf[17];
  snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string SearchPlan::hash() const { return hex64(fnv1a(to_json().dump())); }

// ---------------------------------------------------------------------------
// toy backbone

namespace {

struct BackboneLayer {
  const char* name;
  int cin, cout, stride;
};

// stem to stride 2, then four stages reaching strides 4/8/16/32; the last
// three stage outputs are c3/c4/c5 (64/128/128 channels)
constexpr BackboneLayer kBackbone[] = {
    {"bb.stem", 3, 32, 2},    {"bb.s1a", 32, 32, 2},   {"bb.s1b", 32, 32, 1},
    {"bb.s2a", 32, 64, 2},    {"bb.s2b", 64, 64, 1},   {"bb.s3a", 64, 128, 2},
    {"bb.s3b", 128, 128, 1},  {"bb.s4a", 128, 128, 2}, {"bb.s4b", 128, 128, 1},
};

}  // namespace

Params init_backbone_params(Rng& rng) {
  Params p;
  for (const BackboneLayer& l : kBackbone) {
    p.add(std::string(l.name) + ".w",
          Tensor::randn({l.cout, l.cin, 3, 3}, rng, std::sqrt(2.0 / (l.cin * 9))));
    p.add(std::string(l.name) + ".b", Tensor::zeros({l.cout}));
    p.add(std::string(l.name) + ".norm.gamma", Tensor::full({l.cout}, 1.0f));
    p.add(std::string(l.name) + ".norm.beta", Tensor::zeros({l.cout}));
    p.add(std::string(l.name) + ".norm.rm", Tensor::zeros({l.cout}), true);
    p.add(std::string(l.name) + ".norm.rv", Tensor::full({l.cout}, 1.0f), true);
  }
  return p;
}

std::array<TapeF::Value, 3> backbone_forward(TapeF& tape, Params& params,
                                             TapeF::Value images, bool training,
                                             std::map<std::string, TapeF::Value>* bound_out) {
  std::map<std::string, TapeF::Value> bound;
  auto bind = [&](const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    auto& e = params.entries().at(name);
    TapeF::Value v = tape.leaf(e.value, !e.is_buffer);
    bound.emplace(name, v);
    return v;
  };
  TapeF::Value x = images;
  std::array<TapeF::Value, 3> out{};
  int out_i = 0;
  for (const BackboneLayer& l : kBackbone) {
    std::string n = l.name;
    x = tape.conv2d(x, bind(n + ".w"), bind(n + ".b"), l.stride, 1, 1);
    x = tape.batch_norm(x, bind(n + ".norm.gamma"), bind(n + ".norm.beta"),
                        &params.get(n + ".norm.rm"), &params.get(n + ".norm.rv"),
                        training);
    x = tape.relu(x);
    if (n == "bb.s2b" || n == "bb.s3b" || n == "bb.s4b")
      out[static_cast<size_t>(out_i++)] = x;
  }
  if (bound_out) *bound_out = std::move(bound);
  return out;
}

// ---------------------------------------------------------------------------
// prepare

namespace {

Tensor stack_images(const std::vector<SynthImage>& data, const std::vector<int>& idx) {
  int h = data[0].pixels.dim(1), w = data[0].pixels.dim(2);
  Tensor out = Tensor::zeros({static_cast<int>(idx.size()), 3, h, w});
  size_t sz = data[0].pixels.numel();
  for (size_t b = 0; b < idx.size(); b++)
    std::copy_n(data[static_cast<size_t>(idx[b])].pixels.data(), sz, out.data() + b * sz);
  return out;
}

Tensor stack_features(const std::vector<const Tensor*>& per_image) {
  const Tensor& first = *per_image[0];
  Tensor out = Tensor::zeros({static_cast<int>(per_image.size()), first.dim(0),
                              first.dim(1), first.dim(2)});
  size_t sz = first.numel();
  for (size_t b = 0; b < per_image.size(); b++)
    std::copy_n(per_image[b]->data(), sz, out.data() + b * sz);
  return out;
}

std::array<FeatureSpec, kNumLevels> decoder_target_spec(int image_size) {
  std::array<FeatureSpec, kNumLevels> out{};
  for (int i = 0; i < kNumLevels; i++)
    out[static_cast<size_t>(i)] =
        feature_at(image_size, image_size, kLevelStrides[static_cast<size_t>(i)], 1);
  return out;
}

constexpr uint32_t kFeatureCacheVersion = 1;

void save_features(const std::string& path, uint64_t backbone_hash,
                   const std::vector<std::array<Tensor, 3>>& features) {
  std::ofstream f(path, std::ios::binary);
  NFCS_REQUIRE(f.good(), "cache write failure: cannot open '", path, "'");
  auto put_u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  f.write("NFFC", 4);
  put_u32(kFeatureCacheVersion);
  f.write(reinterpret_cast<const char*>(&backbone_hash), 8);
  put_u32(static_cast<uint32_t>(features.size()));
  for (const auto& img : features)
    for (const Tensor& t : img) {
      put_u32(static_cast<uint32_t>(t.dim(0)));
      put_u32(static_cast<uint32_t>(t.dim(1)));
      put_u32(static_cast<uint32_t>(t.dim(2)));
      f.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
  NFCS_REQUIRE(f.good(), "cache write failure on '", path, "'");
}

bool load_features(const std::string& path, uint64_t expect_hash, size_t expect_n,
                   std::vector<std::array<Tensor, 3>>& out) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) return false;
  char magic[4];
  f.read(magic, 4);
  if (!f.good() || std::string(magic, 4) != "NFFC") return false;
  auto get_u32 = [&] {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  if (get_u32() != kFeatureCacheVersion) return false;
  uint64_t h = 0;
  f.read(reinterpret_cast<char*>(&h), 8);
  if (h != expect_hash) return false;  // backbone changed; cache is stale
  uint32_t n = get_u32();
  if (n != expect_n) return false;
  out.assign(n, {});
  for (auto& img : out)
    for (Tensor& t : img) {
      int c = static_cast<int>(get_u32()), hh = static_cast<int>(get_u32()),
          ww = static_cast<int>(get_u32());
      t = Tensor::zeros({c, hh, ww});
      f.read(reinterpret_cast<char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
      if (!f.good()) return false;
    }
  return true;
}

}  // namespace

PreparedTask prepare(const SearchPlan& plan, bool require_cache) {
  PreparedTask prepared;
  prepared.plan = plan;
  fs::create_directories(plan.cache_dir);

  uint64_t ds_hash = fnv1a("ds|" + std::to_string(plan.seed) + "|" +
                           std::to_string(plan.n_images) + "|" +
                           std::to_string(plan.image_size) + "|" +
                           std::to_string(plan.num_classes));
  std::string ds_path = plan.cache_dir + "/dataset_" + hex64(ds_hash) + ".bin";
  if (fs::exists(ds_path)) {
    prepared.dataset = load_dataset(ds_path);
  } else {
    prepared.dataset = generate_dataset(plan.seed, plan.n_images, plan.image_size,
                                        plan.num_classes);
    save_dataset(prepared.dataset, ds_path);
  }

  // deterministic meta-train / meta-val split
  std::vector<int> order(static_cast<size_t>(plan.n_images));
  for (size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);
  Rng split_rng(Rng::derive(plan.seed, 0x5117));
  for (size_t i = order.size(); i > 1; i--) {
    size_t j = split_rng.bounded(static_cast<uint32_t>(i));
    std::swap(order[i - 1], order[j]);
  }
  int n_train = static_cast<int>(plan.train_fraction * plan.n_images);
  NFCS_REQUIRE(n_train >= 1 && n_train < plan.n_images,
               "split leaves an empty subset");
  prepared.train_idx.assign(order.begin(), order.begin() + n_train);
  prepared.val_idx.assign(order.begin() + n_train, order.end());

  prepared.backbone_spec = {
      feature_at(plan.image_size, plan.image_size, 8, 64),
      feature_at(plan.image_size, plan.image_size, 16, 128),
      feature_at(plan.image_size, plan.image_size, 32, 128)};

  // decoder-level targets are architecture independent; build them once
  auto level_spec = decoder_target_spec(plan.image_size);
  prepared.targets.reserve(prepared.dataset.size());
  for (const SynthImage& img : prepared.dataset)
    prepared.targets.push_back(
        encode_targets(img, level_spec, toy_level_ranges(), plan.num_classes));

  uint64_t prep_hash = fnv1a(
      "prep|" + hex64(ds_hash) + "|" + std::to_string(plan.backbone_iterations) +
      "|" + std::to_string(plan.backbone_batch) + "|" +
      std::to_string(plan.backbone_lr) + "|" + std::to_string(plan.fpn_width) +
      "|" + plan.fpn_norm + "|" + std::to_string(plan.train_fraction));
  std::string bb_path = plan.cache_dir + "/backbone_" + hex64(prep_hash) + ".ckpt";
  std::string feat_path = plan.cache_dir + "/features_" + hex64(prep_hash) + ".bin";

  Params backbone;
  if (fs::exists(bb_path)) {
    backbone = load_params_file<float>(bb_path);
    prepared.backbone_hash = params_hash(backbone);
    if (load_features(feat_path, prepared.backbone_hash, prepared.dataset.size(),
                      prepared.features)) {
      prepared.cache_hit = true;
      return prepared;
    }
    backbone = Params{};
  }
  NFCS_REQUIRE(!require_cache,
               "no prepared feature cache for this plan under '", plan.cache_dir,
               "'; run the `prepare` subcommand with the same plan first");

  // one-off finetuning of the toy backbone against the original decoder
  Rng rng(Rng::derive(plan.seed, 0xBBBB));
  Params joint = init_backbone_params(rng);
  DecoderGraph dec = original_fcos_decoder(prepared.backbone_spec,
                                           {plan.fpn_width, plan.fpn_width},
                                           plan.num_classes, plan.compile_options());
  Params dec_params = init_params(dec, rng);
  for (auto& [name, e] : dec_params.entries())
    joint.add(name, std::move(e.value), e.is_buffer);

  for (int it = 1; it <= plan.backbone_iterations; it++) {
    std::vector<int> idx(static_cast<size_t>(plan.backbone_batch));
    for (auto& v : idx)
      v = prepared.train_idx[split_rng.bounded(static_cast<uint32_t>(n_train))];
    TapeF tape;
    std::map<std::string, TapeF::Value> bb_bound;
    TapeF::Value images = tape.constant(stack_images(prepared.dataset, idx));
    auto c = backbone_forward(tape, joint, images, true, &bb_bound);
    ForwardResult fr = forward_values(tape, dec, joint, {c[0], c[1], c[2]}, true);
    TapeF::Value total = nullptr;
    for (size_t b = 0; b < idx.size(); b++) {
      LossValues lv = build_losses(tape, fr.preds, static_cast<int>(b),
                                   prepared.targets[static_cast<size_t>(idx[b])]);
      total = total ? tape.add(total, lv.total) : lv.total;
    }
    TapeF::Value loss = tape.mul_scalar(total, 1.0f / plan.backbone_batch);
    NFCS_REQUIRE(std::isfinite(loss->value[0]),
                 "backbone training diverged (loss is not finite) at iteration ", it);
    tape.backward(loss);
    std::map<std::string, Tensor> grads = collect_grads(fr);
    for (auto& [name, node] : bb_bound)
      if (node->grad.defined()) grads.emplace(name, node->grad);
    adam_step<float>(joint, grads, static_cast<float>(plan.backbone_lr), 0.9f,
                     0.999f, 1e-8f, it);
  }

  // freeze: keep only backbone entries, cache eval-mode features
  for (auto& [name, e] : joint.entries())
    if (name.rfind("bb.", 0) == 0) backbone.add(name, e.value.clone(), e.is_buffer);
  prepared.backbone_hash = params_hash(backbone);
  save_params_file(backbone, bb_path);

  prepared.features.assign(prepared.dataset.size(), {});
  const int chunk = 8;
  for (size_t at = 0; at < prepared.dataset.size(); at += chunk) {
    std::vector<int> idx;
    for (size_t i = at; i < std::min(at + chunk, prepared.dataset.size()); i++)
      idx.push_back(static_cast<int>(i));
    TapeF tape(false);
    TapeF::Value images = tape.constant(stack_images(prepared.dataset, idx));
    auto c = backbone_forward(tape, backbone, images, false);
    for (size_t b = 0; b < idx.size(); b++)
      for (int fi = 0; fi < 3; fi++) {
        const auto& v = c[static_cast<size_t>(fi)]->value;
        Tensor t = Tensor::zeros({v.dim(1), v.dim(2), v.dim(3)});
        std::copy_n(v.data() + b * t.numel(), t.numel(), t.data());
        prepared.features[static_cast<size_t>(idx[b])][static_cast<size_t>(fi)] = std::move(t);
      }
  }
  save_features(feat_path, prepared.backbone_hash, prepared.features);
  return prepared;
}

// ---------------------------------------------------------------------------
// proxy training / evaluation

namespace {

struct TrainEvalOut {
  bool diverged = false;
  double reward = kDivergedReward;
  LossTerms sums{};
  double toy_ap = -1;
  Params polyak;
};

// Trains a fresh decoder on meta-train inputs and scores it on meta-val with
// the Polyak-averaged weights. `bank` maps image index -> input tensors.
TrainEvalOut train_and_eval(const DecoderGraph& graph,
                            const std::function<std::vector<const Tensor*>(int)>& bank,
                            const PreparedTask& prepared, const SearchPlan& plan,
                            uint64_t seed, int iterations, bool compute_ap) {
  std::vector<bool> is_train(prepared.dataset.size(), false);
  for (int i : prepared.train_idx) is_train[static_cast<size_t>(i)] = true;

  TrainEvalOut out;
  Rng rng(seed);
  Params params = init_params(graph, rng);
  Params polyak = params.clone_values();
  int n_inputs = static_cast<int>(graph.input_nodes.size());
  uint32_t n_train = static_cast<uint32_t>(prepared.train_idx.size());

  auto batch_inputs = [&](const std::vector<int>& idx) {
    std::vector<Tensor> inputs;
    for (int f = 0; f < n_inputs; f++) {
      std::vector<const Tensor*> per_image;
      for (int i : idx) per_image.push_back(bank(i)[static_cast<size_t>(f)]);
      inputs.push_back(stack_features(per_image));
    }
    return inputs;
  };

  for (int it = 1; it <= iterations; it++) {
    std::vector<int> idx(static_cast<size_t>(plan.proxy_batch));
    for (auto& v : idx) {
      v = prepared.train_idx[rng.bounded(n_train)];
      NFCS_REQUIRE(is_train[static_cast<size_t>(v)],
                   "meta-val image leaked into a training batch");
    }
    TapeF tape;
    ForwardResult fr = forward(tape, graph, params, batch_inputs(idx), true);
    TapeF::Value total = nullptr;
    for (size_t b = 0; b < idx.size(); b++) {
      LossValues lv = build_losses(tape, fr.preds, static_cast<int>(b),
                                   prepared.targets[static_cast<size_t>(idx[b])]);
      total = total ? tape.add(total, lv.total) : lv.total;
    }
    TapeF::Value loss = tape.mul_scalar(total, 1.0f / plan.proxy_batch);
    if (!std::isfinite(loss->value[0])) {
      out.diverged = true;
      return out;
    }
    tape.backward(loss);
    adam_step<float>(params, collect_grads(fr), static_cast<float>(plan.adam_lr),
                     0.9f, 0.999f, 1e-8f, it);
    polyak_update<float>(polyak, params, static_cast<float>(plan.polyak_decay));
  }

  // meta-val scoring in eval mode with the averaged weights
  std::vector<Detection> detections;
  std::vector<const SynthImage*> val_images;
  for (size_t at = 0; at < prepared.val_idx.size();
       at += static_cast<size_t>(plan.proxy_batch)) {
    std::vector<int> idx;
    for (size_t i = at;
         i < std::min(at + static_cast<size_t>(plan.proxy_batch), prepared.val_idx.size());
         i++)
      idx.push_back(prepared.val_idx[i]);
    TapeF tape(false);
    ForwardResult fr = forward(tape, graph, polyak, batch_inputs(idx), false);
    for (size_t b = 0; b < idx.size(); b++) {
      LossValues lv = build_losses(tape, fr.preds, static_cast<int>(b),
                                   prepared.targets[static_cast<size_t>(idx[b])]);
      LossTerms terms = lv.terms();
      if (!terms.finite()) {
        out.diverged = true;
        return out;
      }
      out.sums.cls += terms.cls;
      out.sums.reg += terms.reg;
      out.sums.ctr += terms.ctr;
      if (compute_ap) {
        auto dets = decode_detections(fr.preds, static_cast<int>(b),
                                      static_cast<int>(val_images.size()),
                                      static_cast<float>(plan.score_thresh),
                                      static_cast<float>(plan.nms_iou),
                                      plan.image_size);
        detections.insert(detections.end(), dets.begin(), dets.end());
        val_images.push_back(&prepared.dataset[static_cast<size_t>(idx[b])]);
      }
    }
  }
  if (compute_ap)
    out.toy_ap = evaluate_ap(detections, val_images, plan.num_classes).mean;
  out.reward = -(out.sums.cls + out.sums.reg + out.sums.ctr);
  out.polyak = std::move(polyak);
  return out;
}

// prefetched pyramid features for the head stage, keyed by the producing FPN
struct PyramidBank {
  std::vector<std::array<Tensor, kNumLevels>> features;
};

std::mutex g_pbank_mu;
std::map<std::string, std::shared_ptr<PyramidBank>> g_pbank;

std::shared_ptr<PyramidBank> pyramid_bank_for(const PreparedTask& prepared,
                                              const SearchPlan& plan,
                                              const std::vector<int>& fpn_tokens,
                                              uint64_t fpn_seed) {
  std::string key = plan.hash() + "|" + std::to_string(fpn_seed) + "|";
  for (int t : fpn_tokens) key += std::to_string(t) + ",";
  std::lock_guard<std::mutex> lock(g_pbank_mu);
  auto it = g_pbank.find(key);
  if (it != g_pbank.end()) return it->second;

  // replay the producing architecture's proxy training, then push every image
  // through its FPN once
  Widths w{plan.fpn_width, plan.fpn_width};
  DecoderGraph graph =
      fpn_tokens.empty()
          ? original_fcos_decoder(prepared.backbone_spec, w, plan.num_classes,
                                  plan.compile_options())
          : compile_with_original_head(decode_fpn(fpn_tokens), prepared.backbone_spec,
                                       w, plan.num_classes, plan.compile_options());
  auto bank = [&](int i) {
    std::vector<const Tensor*> v;
    for (int f = 0; f < 3; f++)
      v.push_back(&prepared.features[static_cast<size_t>(i)][static_cast<size_t>(f)]);
    return v;
  };
  TrainEvalOut trained = train_and_eval(graph, bank, prepared, plan, fpn_seed,
                                        plan.proxy_iterations, false);
  NFCS_REQUIRE(!trained.diverged,
               "prefetch FPN replay diverged; pick a different architecture");

  auto out = std::make_shared<PyramidBank>();
  out->features.assign(prepared.dataset.size(), {});
  const int chunk = std::max(plan.proxy_batch, 1);
  for (size_t at = 0; at < prepared.dataset.size(); at += static_cast<size_t>(chunk)) {
    std::vector<int> idx;
    for (size_t i = at; i < std::min(at + static_cast<size_t>(chunk), prepared.dataset.size()); i++)
      idx.push_back(static_cast<int>(i));
    std::vector<Tensor> inputs;
    for (int f = 0; f < 3; f++) {
      std::vector<const Tensor*> per_image;
      for (int i : idx)
        per_image.push_back(&prepared.features[static_cast<size_t>(i)][static_cast<size_t>(f)]);
      inputs.push_back(stack_features(per_image));
    }
    TapeF tape(false);
    ForwardResult fr = forward(tape, graph, trained.polyak, inputs, false);
    for (size_t b = 0; b < idx.size(); b++)
      for (int l = 0; l < kNumLevels; l++) {
        const auto& v = fr.pyramid[static_cast<size_t>(l)]->value;
        Tensor t = Tensor::zeros({v.dim(1), v.dim(2), v.dim(3)});
        std::copy_n(v.data() + b * t.numel(), t.numel(), t.data());
        out->features[static_cast<size_t>(idx[b])][static_cast<size_t>(l)] = std::move(t);
      }
  }
  g_pbank.emplace(key, out);
  return out;
}

}  // namespace

EvalOutcome evaluate_job_with_budget(const PreparedTask& prepared,
                                     const SearchPlan& plan, const EvalJob& job,
                                     int iterations) {
  auto t0 = std::chrono::steady_clock::now();
  EvalOutcome out;
  out.seq = job.seq;
  try {
    DecoderGraph graph;
    std::shared_ptr<PyramidBank> pbank;
    std::function<std::vector<const Tensor*>(int)> bank;
    if (job.stage == SearchStage::FpnOnly) {
      graph = compile_with_original_head(decode_fpn(job.tokens), prepared.backbone_spec,
                                         {plan.fpn_width, plan.fpn_width},
                                         plan.num_classes, plan.compile_options());
      bank = [&prepared](int i) {
        std::vector<const Tensor*> v;
        for (int f = 0; f < 3; f++)
          v.push_back(&prepared.features[static_cast<size_t>(i)][static_cast<size_t>(f)]);
        return v;
      };
    } else if (job.stage == SearchStage::HeadOnly) {
      pbank = pyramid_bank_for(prepared, plan, job.fpn_tokens, job.fpn_seed);
      graph = compile_head_only(decode_head(job.tokens), prepared.pyramid_spec(),
                                plan.head_width, plan.num_classes,
                                plan.compile_options());
      bank = [pbank](int i) {
        std::vector<const Tensor*> v;
        for (int l = 0; l < kNumLevels; l++)
          v.push_back(&pbank->features[static_cast<size_t>(i)][static_cast<size_t>(l)]);
        return v;
      };
    } else {
      graph = compile(decode(job.tokens), prepared.backbone_spec,
                      {plan.fpn_width, plan.head_width}, plan.num_classes,
                      plan.compile_options());
      bank = [&prepared](int i) {
        std::vector<const Tensor*> v;
        for (int f = 0; f < 3; f++)
          v.push_back(&prepared.features[static_cast<size_t>(i)][static_cast<size_t>(f)]);
        return v;
      };
    }
    CostReport cr = cost(graph);
    out.macs = cr.macs;
    out.params = cr.params;
    bool want_ap = job.compute_ap || plan.reward_mode == "toyap";
    TrainEvalOut r = train_and_eval(graph, bank, prepared, plan, job.seed, iterations, want_ap);
    if (r.diverged) {
      out.status = "diverged";
      out.reward = kDivergedReward;
    } else {
      out.status = "ok";
      out.val_losses = r.sums;
      out.toy_ap = r.toy_ap;
      out.reward = plan.reward_mode == "toyap" ? r.toy_ap : r.reward;
    }
  } catch (const std::exception& e) {
    out.status = std::string("error:") + e.what();
    out.reward = kDivergedReward;
  }
  out.wall_ms = static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::steady_clock::now() - t0)
          .count());
  return out;
}

EvalOutcome evaluate_job(const PreparedTask& prepared, const SearchPlan& plan,
                         const EvalJob& job) {
  return evaluate_job_with_budget(prepared, plan, job, plan.proxy_iterations);
}

// ---------------------------------------------------------------------------
// local service

LocalEvalService::LocalEvalService(const PreparedTask& prepared, int jobs)
    : prepared_(prepared), jobs_(std::max(jobs, 1)) {}

std::vector<EvalOutcome> LocalEvalService::run(const std::vector<EvalJob>& jobs) {
  std::vector<EvalOutcome> results(jobs.size());
  if (jobs_ == 1 || jobs.size() == 1) {
    for (size_t i = 0; i < jobs.size(); i++)
      results[i] = evaluate_job(prepared_, prepared_.plan, jobs[i]);
  } else {
    std::atomic<size_t> next{0};
    auto work = [&]() {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        results[i] = evaluate_job(prepared_, prepared_.plan, jobs[i]);
      }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min<int>(jobs_, static_cast<int>(jobs.size())); t++)
      pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  std::stable_sort(results.begin(), results.end(),
                   [](const EvalOutcome& a, const EvalOutcome& b) { return a.seq < b.seq; });
  return results;
}

// ---------------------------------------------------------------------------
// records / log

nlohmann::json SearchRecord::to_json() const {
  nlohmann::json j;
  j["seq"] = seq;
  j["stage"] = stage;
  j["tokens"] = tokens;
  j["reward"] = reward;
  j["cls"] = cls;
  j["reg"] = reg;
  j["ctr"] = ctr;
  if (toy_ap >= 0) j["toy_ap"] = toy_ap;
  j["macs"] = macs;
  j["params"] = params;
  j["status"] = status;
  return j;
}

SearchRecord SearchRecord::from_json(const nlohmann::json& j) {
  SearchRecord r;
  r.seq = j.at("seq").get<int64_t>();
  r.stage = j.at("stage").get<std::string>();
  r.tokens = j.at("tokens").get<std::vector<int>>();
  r.reward = j.at("reward").get<double>();
  r.cls = j.at("cls").get<double>();
  r.reg = j.at("reg").get<double>();
  r.ctr = j.at("ctr").get<double>();
  r.toy_ap = j.value("toy_ap", -1.0);
  r.macs = j.at("macs").get<uint64_t>();
  r.params = j.at("params").get<uint64_t>();
  r.status = j.at("status").get<std::string>();
  return r;
}

std::string records_to_jsonl(const std::vector<SearchRecord>& records) {
  std::string out;
  for (const SearchRecord& r : records) out += r.to_json().dump() + "\n";
  return out;
}

std::vector<SearchRecord> read_jsonl(const std::string& path) {
  std::ifstream f(path);
  NFCS_REQUIRE(f.good(), "cannot open log '", path, "'");
  std::vector<SearchRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(SearchRecord::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

std::vector<SearchRecord> top_k(const std::vector<SearchRecord>& records,
                                const std::string& stage, int k) {
  std::vector<SearchRecord> pool;
  for (const SearchRecord& r : records)
    if (r.stage == stage && r.status == "ok") pool.push_back(r);
  std::stable_sort(pool.begin(), pool.end(), [](const SearchRecord& a, const SearchRecord& b) {
    if (a.reward != b.reward) return a.reward > b.reward;
    return a.seq < b.seq;
  });
  if (static_cast<int>(pool.size()) > k) pool.resize(static_cast<size_t>(k));
  return pool;
}

// ---------------------------------------------------------------------------
// progressive search

namespace {

SearchRecord record_from(const EvalJob& job, const EvalOutcome& o) {
  SearchRecord r;
  r.seq = job.seq;
  r.stage = job.stage == SearchStage::FpnOnly ? "fpn" : "head";
  r.tokens = job.tokens;
  r.reward = o.reward;
  r.cls = o.val_losses.cls;
  r.reg = o.val_losses.reg;
  r.ctr = o.val_losses.ctr;
  r.toy_ap = o.toy_ap;
  r.macs = o.macs;
  r.params = o.params;
  r.status = o.status;
  r.wall_ms = o.wall_ms;
  return r;
}

struct RunState {
  std::string phase = "fpn";  // fpn | head | done
  int64_t next_seq = 0;
  uint64_t fpn_rng = 0, head_rng = 0;
  std::vector<int> best_fpn_tokens;
  uint64_t best_fpn_seed = 0;
  std::string plan_hash;

  nlohmann::json to_json() const {
    return {{"phase", phase},
            {"next_seq", next_seq},
            {"fpn_rng", fpn_rng},
            {"head_rng", head_rng},
            {"best_fpn_tokens", best_fpn_tokens},
            {"best_fpn_seed", best_fpn_seed},
            {"plan_hash", plan_hash}};
  }
  static RunState from_json(const nlohmann::json& j) {
    RunState s;
    s.phase = j.at("phase").get<std::string>();
    s.next_seq = j.at("next_seq").get<int64_t>();
    s.fpn_rng = j.at("fpn_rng").get<uint64_t>();
    s.head_rng = j.at("head_rng").get<uint64_t>();
    s.best_fpn_tokens = j.at("best_fpn_tokens").get<std::vector<int>>();
    s.best_fpn_seed = j.at("best_fpn_seed").get<uint64_t>();
    s.plan_hash = j.at("plan_hash").get<std::string>();
    return s;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  NFCS_REQUIRE(f.good(), "cannot write '", path, "'");
  f << text;
  NFCS_REQUIRE(f.good(), "write failed for '", path, "'");
}

void append_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::app);
  NFCS_REQUIRE(f.good(), "cannot append to '", path, "'");
  f << text;
  f.flush();
}

}  // namespace

SearchResult run_progressive_search(const PreparedTask& prepared,
                                    EvalService& service, const std::string& run_dir,
                                    std::function<bool(int64_t)> keep_going) {
  const SearchPlan& plan = prepared.plan;
  fs::create_directories(run_dir);
  std::string log_path = run_dir + "/search.jsonl";
  std::string times_path = run_dir + "/search.times.jsonl";
  std::string state_path = run_dir + "/search.state.json";

  SearchResult result;
  RunState state;
  state.plan_hash = plan.hash();
  state.fpn_rng = Rng(Rng::derive(plan.seed, 0xF91)).state();
  state.head_rng = Rng(Rng::derive(plan.seed, 0x8EAD)).state();
  bool resuming = fs::exists(state_path);
  if (resuming) {
    std::ifstream f(state_path);
    state = RunState::from_json(nlohmann::json::parse(f));
    NFCS_REQUIRE(state.plan_hash == plan.hash(),
                 "resume state was produced by a different plan");
    if (fs::exists(log_path)) result.log = read_jsonl(log_path);
    NFCS_REQUIRE(static_cast<int64_t>(result.log.size()) == state.next_seq,
                 "log and state disagree (", result.log.size(), " records vs seq ",
                 state.next_seq, ")");
  } else {
    write_text(log_path, "");
    write_text(times_path, "");
  }
  bool run_fpn = plan.space_mode == "f" || plan.space_mode == "fh";
  bool run_head = plan.space_mode == "h" || plan.space_mode == "fh";
  if (!run_fpn && state.phase == "fpn") {
    state.phase = "head";
    // head-only mode searches over the original FPN; its prefetch replay
    // seed matches what eval-arch uses for head-stage jobs
    state.best_fpn_seed = Rng::derive(plan.seed, 0xF9);
  }

  auto save_state = [&]() { write_text(state_path, state.to_json().dump() + "\n"); };

  auto run_stage = [&](SearchStage stage, int target, uint64_t& rng_state,
                       const std::string& ctrl_path) -> bool {
    Controller controller(action_space(stage), plan.policy(),
                          Rng::derive(plan.seed, stage == SearchStage::FpnOnly ? 0xC01 : 0xC02));
    std::string stage_name_ = stage == SearchStage::FpnOnly ? "fpn" : "head";
    int64_t done = 0;
    for (const SearchRecord& r : result.log)
      if (r.stage == stage_name_) done++;
    if (done > 0 && fs::exists(ctrl_path)) controller.load(ctrl_path);
    Rng rng(0);
    rng.set_state(rng_state);
    while (done < target) {
      if (keep_going && !keep_going(state.next_seq)) {
        rng_state = rng.state();
        save_state();
        return false;
      }
      int n = std::min<int64_t>(plan.controller_batch, target - done);
      SampleBatch batch = controller.sample(rng, n);
      std::vector<EvalJob> jobs;
      for (int i = 0; i < n; i++) {
        EvalJob job;
        job.seq = state.next_seq++;
        job.stage = stage;
        job.tokens = batch.tokens[static_cast<size_t>(i)];
        if (stage == SearchStage::HeadOnly) {
          job.fpn_tokens = state.best_fpn_tokens;
          job.fpn_seed = state.best_fpn_seed;
        }
        job.seed = Rng::derive(plan.seed, static_cast<uint64_t>(job.seq));
        job.compute_ap = plan.reward_mode == "toyap";
        jobs.push_back(std::move(job));
      }
      std::vector<EvalOutcome> outcomes = service.run(jobs);
      NFCS_REQUIRE(outcomes.size() == jobs.size(), "evaluation dropped jobs");

      // discarded (diverged/error) architectures stay in the log but leave
      // the PPO batch
      SampleBatch kept;
      std::string log_chunk, times_chunk;
      for (size_t i = 0; i < jobs.size(); i++) {
        NFCS_REQUIRE(outcomes[i].seq == jobs[i].seq, "result/job seq mismatch");
        SearchRecord rec = record_from(jobs[i], outcomes[i]);
        log_chunk += rec.to_json().dump() + "\n";
        times_chunk += nlohmann::json{{"seq", rec.seq},
                                      {"wall_ms", outcomes[i].wall_ms},
                                      {"worker", outcomes[i].worker}}
                           .dump() +
                       "\n";
        result.log.push_back(std::move(rec));
        if (outcomes[i].status == "ok") {
          kept.tokens.push_back(batch.tokens[i]);
          kept.old_logp.push_back(batch.old_logp[i]);
          kept.rewards.push_back(outcomes[i].reward);
        }
        done++;
      }
      if (!kept.tokens.empty()) controller.ppo_update(kept);
      append_text(log_path, log_chunk);
      append_text(times_path, times_chunk);
      controller.save(ctrl_path);
      rng_state = rng.state();
      save_state();
    }
    rng_state = rng.state();
    return true;
  };

  if (run_fpn && state.phase == "fpn") {
    if (!run_stage(SearchStage::FpnOnly, plan.archs_fpn, state.fpn_rng,
                   run_dir + "/ctrl_fpn.ckpt"))
      return result;
    result.top_fpn = top_k(result.log, "fpn", plan.top_k_fpn);
    NFCS_REQUIRE(!result.top_fpn.empty(), "no usable fpn architecture was found");
    state.best_fpn_tokens = result.top_fpn[0].tokens;
    state.best_fpn_seed = Rng::derive(plan.seed, static_cast<uint64_t>(result.top_fpn[0].seq));
    state.phase = run_head ? "head" : "done";
    save_state();
  } else if (run_fpn) {
    result.top_fpn = top_k(result.log, "fpn", plan.top_k_fpn);
  }

  if (run_head && state.phase == "head") {
    // warm the prefetch cache before dispatching head jobs
    pyramid_bank_for(prepared, plan, state.best_fpn_tokens, state.best_fpn_seed);
    if (!run_stage(SearchStage::HeadOnly, plan.archs_head, state.head_rng,
                   run_dir + "/ctrl_head.ckpt"))
      return result;
    result.top_head = top_k(result.log, "head", plan.top_k_head);
    state.phase = "done";
    save_state();
  } else if (run_head) {
    result.top_head = top_k(result.log, "head", plan.top_k_head);
  }

  result.best_fpn_tokens = state.best_fpn_tokens;
  result.best_fpn_seed = state.best_fpn_seed;
  return result;
}

// ---------------------------------------------------------------------------
// analysis

std::vector<double> sharing_trend(const std::vector<SearchRecord>& records, int window) {
  std::vector<const SearchRecord*> heads;
  for (const SearchRecord& r : records)
    if (r.stage == "head") heads.push_back(&r);
  std::vector<double> out;
  for (size_t at = 0; at + static_cast<size_t>(window) <= heads.size();
       at += static_cast<size_t>(window)) {
    int shared = 0;
    for (size_t i = at; i < at + static_cast<size_t>(window); i++)
      if (heads[i]->tokens.back() == 0) shared++;
    out.push_back(static_cast<double>(shared) / window);
  }
  return out;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  NFCS_REQUIRE(a.size() == b.size() && a.size() >= 2, "need paired samples");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> order(v.size());
    for (size_t i = 0; i < v.size(); i++) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t x, size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    size_t i = 0;
    while (i < order.size()) {
      size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) j++;
      double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (size_t k = i; k <= j; k++) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (size_t i = 0; i < ra.size(); i++) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= static_cast<double>(ra.size());
  mb /= static_cast<double>(rb.size());
  double num = 0, da = 0, db = 0;
  for (size_t i = 0; i < ra.size(); i++) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  NFCS_REQUIRE(da > 0 && db > 0, "constant ranks have no correlation");
  return num / std::sqrt(da * db);
}

CorrelationResult correlation_study(const PreparedTask& prepared,
                                    const std::vector<SearchRecord>& log,
                                    const SearchResult* ctx, int n, int long_budget) {
  std::vector<const SearchRecord*> ok;
  for (const SearchRecord& r : log)
    if (r.status == "ok") ok.push_back(&r);
  NFCS_REQUIRE(static_cast<int>(ok.size()) >= n, "log holds only ", ok.size(),
               " usable records, need ", n);
  std::stable_sort(ok.begin(), ok.end(), [](const SearchRecord* a, const SearchRecord* b) {
    return a->reward < b->reward;
  });
  // quantile-spaced picks cover the whole reward range
  std::vector<const SearchRecord*> picks;
  std::set<std::vector<int>> seen;
  for (int i = 0; i < n; i++) {
    size_t at = ok.size() <= 1 ? 0 : (static_cast<size_t>(i) * (ok.size() - 1)) / (n - 1);
    size_t probe = at;
    while (probe < ok.size() && seen.count(ok[probe]->tokens)) probe++;
    if (probe == ok.size()) {
      probe = at;
      while (probe > 0 && seen.count(ok[probe]->tokens)) probe--;
    }
    if (seen.count(ok[probe]->tokens)) continue;
    seen.insert(ok[probe]->tokens);
    picks.push_back(ok[probe]);
  }

  std::vector<EvalJob> jobs;
  for (const SearchRecord* r : picks) {
    EvalJob job;
    job.seq = r->seq;
    job.stage = r->stage == "fpn" ? SearchStage::FpnOnly : SearchStage::HeadOnly;
    job.tokens = r->tokens;
    if (job.stage == SearchStage::HeadOnly) {
      NFCS_REQUIRE(ctx, "head-stage records need the search context");
      job.fpn_tokens = ctx->best_fpn_tokens;
      job.fpn_seed = ctx->best_fpn_seed;
    }
    job.seed = Rng::derive(prepared.plan.seed, static_cast<uint64_t>(r->seq));
    job.compute_ap = true;
    jobs.push_back(std::move(job));
  }
  // long replays are independent; spread them over the configured job count
  std::vector<EvalOutcome> outcomes(jobs.size());
  {
    std::atomic<size_t> next{0};
    auto work = [&] {
      for (;;) {
        size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        outcomes[i] = evaluate_job_with_budget(prepared, prepared.plan, jobs[i], long_budget);
      }
    };
    int nthreads = std::max(1, std::min<int>(prepared.plan.jobs, static_cast<int>(jobs.size())));
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; t++) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  CorrelationResult result;
  std::vector<double> rewards, aps;
  for (size_t i = 0; i < jobs.size(); i++) {
    if (outcomes[i].status != "ok") continue;
    result.points.push_back({picks[i]->seq, picks[i]->reward, outcomes[i].toy_ap});
    rewards.push_back(picks[i]->reward);
    aps.push_back(outcomes[i].toy_ap);
  }
  NFCS_REQUIRE(rewards.size() >= 3, "too few successful replays for a correlation");
  auto constant = [](const std::vector<double>& v) {
    for (double x : v)
      if (x != v[0]) return false;
    return true;
  };
  if (constant(rewards) || constant(aps)) {
    result.degenerate = true;
    result.spearman = 0;
  } else {
    result.spearman = spearman_rho(rewards, aps);
  }
  return result;
}

AblationReport deform_fpn_baseline(const PreparedTask& prepared) {
  const SearchPlan& plan = prepared.plan;
  DecoderGraph graph = deform_fpn_decoder(prepared.backbone_spec,
                                          {plan.fpn_width, plan.fpn_width},
                                          plan.num_classes, plan.compile_options());
  auto bank = [&prepared](int i) {
    std::vector<const Tensor*> v;
    for (int f = 0; f < 3; f++)
      v.push_back(&prepared.features[static_cast<size_t>(i)][static_cast<size_t>(f)]);
    return v;
  };
  TrainEvalOut r = train_and_eval(graph, bank, prepared, plan,
                                  Rng::derive(plan.seed, 0xDEF0),
                                  plan.proxy_iterations, true);
  CostReport cr = cost(graph);
  AblationReport report;
  report.name = "deform_fpn_baseline";
  report.details = {{"reward", r.diverged ? kDivergedReward : r.reward},
                    {"toy_ap", r.toy_ap},
                    {"macs", cr.macs},
                    {"params", cr.params},
                    {"status", r.diverged ? "diverged" : "ok"}};
  return report;
}

}  // namespace nfcs
