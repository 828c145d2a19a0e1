#include "ogfr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "ogfr/error.hpp"

namespace ogfr::synth {

namespace {

constexpr std::string_view kRecordMagic = "OGFRIMG1";
constexpr std::uint64_t kTagTorsoHue = 1;
constexpr std::uint64_t kTagLegHue = 2;
constexpr std::uint64_t kTagProto = 100;
constexpr std::uint64_t kTagTrain = 200;
constexpr std::uint64_t kTagEval = 300;

double frac(double x) { return x - std::floor(x); }

Rgb hsv(double h, double s, double v) {
  h = frac(h) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

int iround(double v) { return static_cast<int>(std::lround(v)); }

double camera_gain(int camera, int num_cameras) {
  if (num_cameras <= 1) return 1.0;
  return 1.0 + 0.3 * (static_cast<double>(camera) / (num_cameras - 1) - 0.5);
}

}  // namespace

const char* part_name(Part p) {
  switch (p) {
    case Part::kBackground: return "background";
    case Part::kHead: return "head";
    case Part::kLeftArm: return "left arm";
    case Part::kRightArm: return "right arm";
    case Part::kTorso: return "torso";
    case Part::kLeftLeg: return "left leg";
    case Part::kRightLeg: return "right leg";
    case Part::kLeftFoot: return "left foot";
    case Part::kRightFoot: return "right foot";
  }
  return "?";
}

double rgb_distance(const Rgb& a, const Rgb& b) {
  const double dr = a.r - b.r, dg = a.g - b.g, db = a.b - b.b;
  return std::sqrt(dr * dr + dg * dg + db * db);
}

std::size_t ParsingMask::channel_count(std::size_t k) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(k)));
}

bool ParsingMask::valid() const {
  if (labels.size() != height * width) return false;
  return std::all_of(labels.begin(), labels.end(), [this](std::uint8_t l) { return l <= num_parts; });
}

bool PartShape::covers(int h, int w) const {
  if (!box.contains(h, w)) return false;
  if (!ellipse) return true;
  const double cy = box.top + (box.height - 1) / 2.0;
  const double cx = box.left + (box.width - 1) / 2.0;
  const double ry = box.height / 2.0, rx = box.width / 2.0;
  const double dy = (h - cy) / ry, dx = (w - cx) / rx;
  return dy * dy + dx * dx <= 1.0;
}

Prototype generate_identity_prototype(int id, std::uint64_t seed) {
  if (id < 0) throw ConfigError("identity id must be non-negative, got " + std::to_string(id));
  const Rng base(seed);
  // Hue offsets are per-seed; successive ids step around the hue circle by
  // irrational fractions so neighbouring ids never share torso or leg colors.
  const double torso_h0 = base.split(kTagTorsoHue).uniform();
  const double leg_h0 = base.split(kTagLegHue).uniform();
  Rng rng = base.split(kTagProto, static_cast<std::uint64_t>(id));

  Prototype p;
  p.identity = id;
  const Rgb torso = hsv(torso_h0 + id * 0.6180339887498949, rng.uniform(0.6, 0.95), rng.uniform(0.6, 0.95));
  const Rgb legs = hsv(leg_h0 + id * 0.7548776662466927, rng.uniform(0.5, 0.9), rng.uniform(0.35, 0.85));
  const Rgb skin = hsv(rng.uniform(0.03, 0.1), rng.uniform(0.3, 0.6), rng.uniform(0.5, 0.95));
  const Rgb shoes = hsv(rng.uniform(), rng.uniform(0.2, 0.5), rng.uniform(0.1, 0.45));
  const double sleeve = rng.uniform(0.7, 0.9);
  const Rgb arms{static_cast<float>(torso.r * sleeve), static_cast<float>(torso.g * sleeve),
                 static_cast<float>(torso.b * sleeve)};

  p.colors[static_cast<std::size_t>(Part::kHead)] = skin;
  p.colors[static_cast<std::size_t>(Part::kLeftArm)] = arms;
  p.colors[static_cast<std::size_t>(Part::kRightArm)] = arms;
  p.colors[static_cast<std::size_t>(Part::kTorso)] = torso;
  p.colors[static_cast<std::size_t>(Part::kLeftLeg)] = legs;
  p.colors[static_cast<std::size_t>(Part::kRightLeg)] = legs;
  p.colors[static_cast<std::size_t>(Part::kLeftFoot)] = shoes;
  p.colors[static_cast<std::size_t>(Part::kRightFoot)] = shoes;

  p.head_scale = static_cast<float>(rng.uniform(0.85, 1.15));
  p.torso_frac = static_cast<float>(rng.uniform(0.27, 0.32));
  p.leg_frac = static_cast<float>(rng.uniform(0.26, 0.31));
  p.body_width_frac = static_cast<float>(rng.uniform(0.30, 0.40));
  return p;
}

PoseJitter sample_jitter(Rng& rng, int max_shift) {
  const auto span = static_cast<std::uint64_t>(2 * max_shift + 1);
  return {static_cast<int>(rng.below(span)) - max_shift, static_cast<int>(rng.below(span)) - max_shift};
}

namespace {

// Non-overlapping layout: one-pixel gaps separate the head, torso, arms, legs and feet.
std::vector<PartShape> layout(const Prototype& proto, PoseJitter jitter, std::size_t height, std::size_t width) {
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  const int cx = static_cast<int>(width / 2) + jitter.dx;
  const int top0 = std::max(0, iround(0.02 * H) + jitter.dy);

  const int head_h = std::max(3, iround(0.14 * H * proto.head_scale));
  const int head_w = std::max(3, iround(0.28 * W * proto.head_scale));
  const int torso_top = top0 + head_h + 1;
  const int torso_h = std::max(3, iround(proto.torso_frac * H));
  const int torso_w = std::max(5, iround(proto.body_width_frac * W));
  const int torso_left = cx - torso_w / 2;
  const int arm_w = std::max(2, iround(0.09 * W));
  const int arm_h = std::max(2, torso_h - 2);
  const int leg_top = torso_top + torso_h + 1;
  const int leg_h = std::max(3, iround(proto.leg_frac * H));
  const int leg_w = std::max(2, (torso_w - 1) / 2);
  const int foot_top = leg_top + leg_h + 1;
  const int foot_h = std::max(2, iround(0.06 * H));
  const int foot_w = leg_w + 2;
  const int right_leg_left = torso_left + torso_w - leg_w;

  return {
      {Part::kHead, true, {top0, cx - head_w / 2, head_h, head_w}},
      {Part::kLeftArm, false, {torso_top, torso_left - 1 - arm_w, arm_h, arm_w}},
      {Part::kRightArm, false, {torso_top, torso_left + torso_w + 1, arm_h, arm_w}},
      {Part::kTorso, false, {torso_top, torso_left, torso_h, torso_w}},
      {Part::kLeftLeg, false, {leg_top, torso_left, leg_h, leg_w}},
      {Part::kRightLeg, false, {leg_top, right_leg_left, leg_h, leg_w}},
      {Part::kLeftFoot, false, {foot_top, torso_left - 2, foot_h, foot_w}},
      {Part::kRightFoot, false, {foot_top, right_leg_left, foot_h, foot_w}},
  };
}

}  // namespace

Rendered render(const Prototype& proto, int camera, PoseJitter jitter, const RenderConfig& cfg, Rng& rng) {
  if (camera < 0 || camera >= cfg.num_cameras) {
    throw ConfigError("camera " + std::to_string(camera) + " outside [0, " + std::to_string(cfg.num_cameras) + ")");
  }
  const std::size_t H = cfg.height, W = cfg.width;
  Rendered out;
  out.image.height = H;
  out.image.width = W;
  out.image.pixels.assign(H * W * 3, 0.f);
  out.image.identity = proto.identity;
  out.image.camera = camera;
  out.mask = ParsingMask(H, W);
  out.shapes = layout(proto, jitter, H, W);

  const double gain = camera_gain(camera, cfg.num_cameras);
  const double grey = rng.uniform(0.25, 0.75);
  const double tint[3] = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t c = 0; c < 3; ++c)
        out.image.at(h, w, c) = clamp01((grey + tint[c] + rng.uniform(-0.1, 0.1)) * gain);

  for (const PartShape& s : out.shapes) {
    const Rgb col = proto.colors[static_cast<std::size_t>(s.part)];
    const double rgb[3] = {col.r, col.g, col.b};
    for (int h = std::max(0, s.box.top); h < std::min<int>(H, s.box.top + s.box.height); ++h) {
      for (int w = std::max(0, s.box.left); w < std::min<int>(W, s.box.left + s.box.width); ++w) {
        if (!s.covers(h, w)) continue;
        out.mask.at(h, w) = static_cast<std::uint8_t>(s.part);
        for (std::size_t c = 0; c < 3; ++c) out.image.at(h, w, c) = clamp01((rgb[c] + rng.uniform(-0.04, 0.04)) * gain);
      }
    }
  }
  return out;
}

Obstacle sample_obstacle(std::size_t height, std::size_t width, const OcclusionOptions& opts, Rng& rng) {
  Obstacle ob;
  ob.texture_seed = rng.next_u64();
  if (!opts.enabled()) return ob;
  if (opts.min_area_frac < 0 || opts.max_area_frac > 1 || opts.min_area_frac > opts.max_area_frac) {
    throw ConfigError("occlusion area fractions must satisfy 0 <= min <= max <= 1");
  }
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  const double area = rng.uniform(opts.min_area_frac, opts.max_area_frac) * H * W;
  const int h_min = std::max(1, static_cast<int>(std::ceil(area / W)));
  const int h_max = std::max(h_min, std::min(static_cast<int>(height), static_cast<int>(std::floor(area))));
  const int h = h_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(h_max - h_min + 1)));
  const int w = std::clamp(iround(area / h), 1, static_cast<int>(width));
  ob.rect.height = h;
  ob.rect.width = w;
  ob.rect.top = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - h + 1)));
  ob.rect.left = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - w + 1)));
  return ob;
}

Occluded apply_obstacle(const SynthImage& img, const ParsingMask& mask, const Obstacle& obstacle) {
  const Rect& r = obstacle.rect;
  if (r.top < 0 || r.left < 0 || r.height < 0 || r.width < 0 || r.top + r.height > static_cast<int>(img.height) ||
      r.left + r.width > static_cast<int>(img.width)) {
    throw ContractError("obstacle rectangle does not lie inside the image");
  }
  Occluded out{img, mask, obstacle};
  if (r.area() == 0) return out;
  Rng tex(obstacle.texture_seed);
  const double base[3] = {tex.uniform(0.05, 0.95), tex.uniform(0.05, 0.95), tex.uniform(0.05, 0.95)};
  const int period = 2 + static_cast<int>(tex.below(3));
  for (int h = r.top; h < r.top + r.height; ++h) {
    for (int w = r.left; w < r.left + r.width; ++w) {
      const double stripe = ((h + w) / period) % 2 == 0 ? 0.12 : -0.12;
      for (std::size_t c = 0; c < 3; ++c) out.image.at(h, w, c) = clamp01(base[c] + stripe + tex.uniform(-0.08, 0.08));
      out.mask.at(h, w) = 0;
    }
  }
  return out;
}

Occluded occlude(const SynthImage& img, const ParsingMask& mask, const OcclusionOptions& opts, Rng& rng) {
  return apply_obstacle(img, mask, sample_obstacle(img.height, img.width, opts, rng));
}

Dataset build_splits(int n_ids, int imgs_per_id, const SplitOptions& opts) {
  if (n_ids < 2) throw ConfigError("need at least 2 identities, got " + std::to_string(n_ids));
  if (imgs_per_id < 2) throw ConfigError("every identity needs at least 2 images, got " + std::to_string(imgs_per_id));
  if (opts.render.num_cameras < 2) throw ConfigError("cross-camera evaluation needs at least 2 cameras");
  if (opts.query_per_id < 1 || opts.gallery_per_id < 1) throw ConfigError("query_per_id and gallery_per_id must be >= 1");

  Dataset ds;
  ds.height = opts.render.height;
  ds.width = opts.render.width;
  ds.num_cameras = opts.render.num_cameras;
  ds.num_train_ids = n_ids;
  ds.seed = opts.seed;
  const auto n_cam = static_cast<std::uint64_t>(opts.render.num_cameras);
  const Rng root(opts.seed);

  for (int id = 0; id < n_ids; ++id) {
    const Prototype proto = generate_identity_prototype(id, opts.seed);
    for (int j = 0; j < imgs_per_id; ++j) {
      Rng rng = root.split(kTagTrain, static_cast<std::uint64_t>(id)).split(static_cast<std::uint64_t>(j));
      const int cam = static_cast<int>(rng.below(n_cam));
      const PoseJitter jit = sample_jitter(rng);
      Rendered r = render(proto, cam, jit, opts.render, rng);
      ds.train.push_back(ds.samples.size());
      ds.samples.push_back({std::move(r.image), std::move(r.mask), false});
    }
  }

  const int first_eval = opts.disjoint_eval_ids ? n_ids : 0;
  for (int id = first_eval; id < first_eval + n_ids; ++id) {
    const Prototype proto = generate_identity_prototype(id, opts.seed);
    Rng rng = root.split(kTagEval, static_cast<std::uint64_t>(id));
    const int qcam = static_cast<int>(rng.below(n_cam));
    for (int q = 0; q < opts.query_per_id; ++q) {
      Rendered r = render(proto, qcam, sample_jitter(rng), opts.render, rng);
      Occluded o = occlude(r.image, r.mask, opts.occlusion, rng);
      ds.query.push_back(ds.samples.size());
      ds.samples.push_back({std::move(o.image), std::move(o.mask), opts.occlusion.enabled()});
    }
    for (int g = 0; g < opts.gallery_per_id; ++g) {
      const int cam = static_cast<int>((qcam + 1 + g % (opts.render.num_cameras - 1)) % opts.render.num_cameras);
      Rendered r = render(proto, cam, sample_jitter(rng), opts.render, rng);
      ds.gallery.push_back(ds.samples.size());
      ds.samples.push_back({std::move(r.image), std::move(r.mask), false});
    }
  }
  return ds;
}

std::vector<std::uint8_t> encode_record(const SynthImage& img, const ParsingMask& mask) {
  if (mask.height != img.height || mask.width != img.width) throw DimensionError("image and mask sizes differ");
  binio::Writer w;
  w.magic(kRecordMagic);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(img.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(img.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(mask.num_parts));
  w.bytes(img.pixels.data(), img.pixels.size() * sizeof(float));
  w.bytes(mask.labels.data(), mask.labels.size());
  return std::move(w.buffer());
}

void decode_record(const std::vector<std::uint8_t>& bytes, SynthImage& img, ParsingMask& mask) {
  binio::Reader r(bytes, "image record");
  r.expect_magic(kRecordMagic);
  const auto H = r.get<std::uint32_t>();
  const auto W = r.get<std::uint32_t>();
  const auto K = r.get<std::uint32_t>();
  if (static_cast<std::size_t>(H) * W * (3 * sizeof(float) + 1) != r.remaining()) {
    throw FormatError("image record: payload size does not match header " + std::to_string(H) + "x" +
                      std::to_string(W));
  }
  img.height = H;
  img.width = W;
  img.pixels.resize(static_cast<std::size_t>(H) * W * 3);
  r.bytes(img.pixels.data(), img.pixels.size() * sizeof(float));
  mask = ParsingMask(H, W, K);
  r.bytes(mask.labels.data(), mask.labels.size());
  if (!mask.valid()) throw FormatError("image record: mask label exceeds part count");
}

void write_archive(const Dataset& ds, const std::filesystem::path& dir, const ArchiveStamp& stamp) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());

  nlohmann::json records = nlohmann::json::array();
  std::vector<int> identities, cameras;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.bin", i);
    binio::write_file((dir / name).string(), encode_record(s.image, s.mask));
    records.push_back({{"file", name}, {"identity", s.image.identity}, {"camera", s.image.camera},
                       {"occluded", s.occluded}});
    identities.push_back(s.image.identity);
    cameras.push_back(s.image.camera);
  }
  std::sort(identities.begin(), identities.end());
  identities.erase(std::unique(identities.begin(), identities.end()), identities.end());

  nlohmann::json meta = {
      {"format", "ogfr-dataset/1"},
      {"seed", ds.seed},
      {"config_hash", stamp.config_hash},
      {"data_hash", stamp.data_hash},
      {"height", ds.height},
      {"width", ds.width},
      {"num_parts", ds.num_parts},
      {"num_cameras", ds.num_cameras},
      {"num_train_ids", ds.num_train_ids},
      {"identities", identities},
      {"cameras", cameras},
      {"records", records},
      {"splits", {{"train", ds.train}, {"query", ds.query}, {"gallery", ds.gallery}}},
  };
  std::ofstream out(dir / "meta.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

Dataset read_archive(const std::filesystem::path& dir, ArchiveStamp* stamp) {
  const auto meta_path = dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw IoError("cannot open dataset archive " + meta_path.string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  try {
    if (meta.at("format") != "ogfr-dataset/1") throw FormatError(meta_path.string() + ": unknown format tag");
    Dataset ds;
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.height = meta.at("height").get<std::size_t>();
    ds.width = meta.at("width").get<std::size_t>();
    ds.num_parts = meta.at("num_parts").get<std::size_t>();
    ds.num_cameras = meta.at("num_cameras").get<int>();
    ds.num_train_ids = meta.at("num_train_ids").get<int>();
    for (const auto& rec : meta.at("records")) {
      Sample s;
      decode_record(binio::read_file((dir / rec.at("file").get<std::string>()).string()), s.image, s.mask);
      if (s.image.height != ds.height || s.image.width != ds.width) {
        throw FormatError("record " + rec.at("file").get<std::string>() + " has the wrong resolution");
      }
      s.image.identity = rec.at("identity").get<int>();
      s.image.camera = rec.at("camera").get<int>();
      s.occluded = rec.at("occluded").get<bool>();
      ds.samples.push_back(std::move(s));
    }
    ds.train = meta.at("splits").at("train").get<std::vector<std::size_t>>();
    ds.query = meta.at("splits").at("query").get<std::vector<std::size_t>>();
    ds.gallery = meta.at("splits").at("gallery").get<std::vector<std::size_t>>();
    for (const auto* split : {&ds.train, &ds.query, &ds.gallery})
      for (std::size_t i : *split)
        if (i >= ds.samples.size()) throw FormatError(meta_path.string() + ": split index out of range");
    if (stamp) {
      stamp->config_hash = meta.at("config_hash").get<std::string>();
      stamp->data_hash = meta.at("data_hash").get<std::string>();
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
}

}  // namespace ogfr::synth
