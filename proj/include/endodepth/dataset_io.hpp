#pragma once

// On-disk formats: PFM depth rasters, binary PGM/PPM images and a JSON manifest tying frames,
// poses and sparse points together.
//
// Dataset layout:
//   <root>/manifest.json
//   <root>/images/frame_NNNN.pgm   16-bit P5 intensity
//   <root>/depth/frame_NNNN.pfm    ground-truth depth, little-endian "Pf"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "endodepth/annotations.hpp"
#include "endodepth/errors.hpp"
#include "endodepth/geometry.hpp"
#include "endodepth/raster.hpp"

namespace endodepth {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline constexpr int kDatasetVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

namespace detail {

inline std::string read_file_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

// Whitespace/comment-aware tokenizer for PNM and PFM headers.
class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::string token(bool allow_comments) {
    skip_space(allow_comments);
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) ++pos_;
    if (start == pos_) throw ParseError(what_ + ": truncated header");
    return bytes_.substr(start, pos_ - start);
  }

  long integer(bool allow_comments, long lo, long hi, const char* field) {
    const std::string t = token(allow_comments);
    std::size_t used = 0;
    long value = 0;
    try {
      value = std::stol(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size() || value < lo || value > hi)
      throw ParseError(what_ + ": bad " + field + " '" + t + "'");
    return value;
  }

  // The header ends with exactly one whitespace byte before the payload.
  std::size_t end_of_header() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
      throw ParseError(what_ + ": missing whitespace after header");
    return pos_ + 1;
  }

 private:
  void skip_space(bool allow_comments) {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (allow_comments && c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

constexpr long kMaxDimension = 1L << 15;

constexpr std::uint32_t swap_bytes(std::uint32_t x) {
  return (x >> 24) | ((x >> 8) & 0xff00u) | ((x << 8) & 0xff0000u) | (x << 24);
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// PFM

/// Grayscale PFM, little-endian, rows stored bottom to top. Values are narrowed to float.
inline std::string encode_pfm(const Raster<double>& raster) {
  std::string out = "Pf\n" + std::to_string(raster.width()) + " " + std::to_string(raster.height()) + "\n-1.0\n";
  const std::size_t header = out.size();
  out.resize(header + raster.size() * 4);
  char* dst = out.data() + header;
  for (int v = raster.height() - 1; v >= 0; --v)
    for (int u = 0; u < raster.width(); ++u) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(raster(v, u)));
      if constexpr (std::endian::native == std::endian::big) bits = detail::swap_bytes(bits);
      std::memcpy(dst, &bits, 4);
      dst += 4;
    }
  return out;
}

inline Raster<double> decode_pfm(const std::string& bytes, const std::string& what = "PFM") {
  detail::HeaderReader h(bytes, what);
  const std::string magic = h.token(false);
  if (magic == "PF") throw ParseError(what + ": colour PFM ('PF') where grayscale ('Pf') was expected");
  if (magic != "Pf") throw ParseError(what + ": bad magic '" + magic + "'");
  const long w = h.integer(false, 1, detail::kMaxDimension, "width");
  const long ht = h.integer(false, 1, detail::kMaxDimension, "height");
  const std::string scale_text = h.token(false);
  double scale = 0.0;
  try {
    std::size_t used = 0;
    scale = std::stod(scale_text, &used);
    if (used != scale_text.size()) scale = 0.0;
  } catch (const std::exception&) {
    scale = 0.0;
  }
  if (scale == 0.0 || !std::isfinite(scale)) throw ParseError(what + ": bad scale '" + scale_text + "'");
  const bool file_little = scale < 0.0;
  const bool swap = file_little != (std::endian::native == std::endian::little);
  const std::size_t start = h.end_of_header();
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(ht) * 4;
  if (bytes.size() - start != need)
    throw ParseError(what + ": expected " + std::to_string(need) + " payload bytes, found " + std::to_string(bytes.size() - start));
  Raster<double> r(static_cast<int>(w), static_cast<int>(ht));
  const char* src = bytes.data() + start;
  for (long v = ht - 1; v >= 0; --v)
    for (long u = 0; u < w; ++u) {
      std::uint32_t bits;
      std::memcpy(&bits, src, 4);
      src += 4;
      if (swap) bits = detail::swap_bytes(bits);
      r(static_cast<int>(v), static_cast<int>(u)) = static_cast<double>(std::bit_cast<float>(bits));
    }
  return r;
}

inline void write_pfm(const fs::path& path, const Raster<double>& raster) {
  detail::write_file_bytes(path, encode_pfm(raster));
}

inline Raster<double> read_pfm(const fs::path& path) { return decode_pfm(detail::read_file_bytes(path), path.string()); }

/// Rounds every value to the nearest float so the raster survives a PFM round trip unchanged.
inline void quantize_to_float(Raster<double>& r) {
  for (double& x : r.values()) x = static_cast<double>(static_cast<float>(x));
}

// ---------------------------------------------------------------------------------------------
// PGM / PPM

/// Multi-channel 16-bit-or-less samples as read from or written to binary PNM.
struct PnmImage {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 for P5, 3 for P6
  int maxval = 255;
  std::vector<std::uint16_t> samples;  // interleaved, row-major, top row first

  bool operator==(const PnmImage&) const = default;
};

inline std::string encode_pnm(const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw InvalidArgument("PNM images have 1 or 3 channels");
  if (img.maxval < 1 || img.maxval > 65535) throw InvalidArgument("PNM maxval must lie in [1, 65535]");
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (img.samples.size() != n) throw ShapeError("PNM sample count does not match dimensions");
  std::string out = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n" + std::to_string(img.maxval) + "\n";
  const bool wide = img.maxval > 255;
  out.reserve(out.size() + n * (wide ? 2 : 1));
  for (std::uint16_t s : img.samples) {
    if (s > img.maxval) throw InvalidArgument("PNM sample exceeds maxval");
    if (wide) out.push_back(static_cast<char>(s >> 8));
    out.push_back(static_cast<char>(s & 0xff));
  }
  return out;
}

inline PnmImage decode_pnm(const std::string& bytes, const std::string& what = "PNM") {
  detail::HeaderReader h(bytes, what);
  const std::string magic = h.token(true);
  PnmImage img;
  if (magic == "P5")
    img.channels = 1;
  else if (magic == "P6")
    img.channels = 3;
  else
    throw ParseError(what + ": unsupported magic '" + magic + "' (binary P5/P6 only)");
  img.width = static_cast<int>(h.integer(true, 1, detail::kMaxDimension, "width"));
  img.height = static_cast<int>(h.integer(true, 1, detail::kMaxDimension, "height"));
  img.maxval = static_cast<int>(h.integer(true, 1, 65535, "maxval"));
  const std::size_t start = h.end_of_header();
  const bool wide = img.maxval > 255;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (bytes.size() - start != n * (wide ? 2 : 1))
    throw ParseError(what + ": payload size does not match header");
  img.samples.resize(n);
  const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + start);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint16_t s = wide ? static_cast<std::uint16_t>((src[2 * i] << 8) | src[2 * i + 1]) : src[i];
    if (s > img.maxval) throw ParseError(what + ": sample exceeds maxval");
    img.samples[i] = s;
  }
  return img;
}

inline void write_pnm(const fs::path& path, const PnmImage& img) { detail::write_file_bytes(path, encode_pnm(img)); }
inline PnmImage read_pnm(const fs::path& path) { return decode_pnm(detail::read_file_bytes(path), path.string()); }

/// Intensity in [0,1] to a single-channel image with the given maxval (values are clamped and rounded).
inline PnmImage to_pnm(const IntensityImage& image, int maxval = 65535) {
  PnmImage img{image.width(), image.height(), 1, maxval, {}};
  img.samples.reserve(image.size());
  for (double x : image.values())
    img.samples.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(x, 0.0, 1.0) * maxval)));
  return img;
}

/// Grayscale view of a PNM image: samples / maxval, colour averaged over channels.
inline IntensityImage to_intensity(const PnmImage& img) {
  IntensityImage out(img.width, img.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    for (int c = 0; c < img.channels; ++c) acc += img.samples[i * img.channels + c];
    out[i] = acc / (static_cast<double>(img.channels) * img.maxval);
  }
  return out;
}

/// Rounds intensities to the 16-bit grid so an image survives a PGM round trip unchanged.
inline void quantize_to_16bit(IntensityImage& image) { image = to_intensity(to_pnm(image)); }

inline void write_pgm(const fs::path& path, const IntensityImage& image) { write_pnm(path, to_pnm(image)); }
inline IntensityImage read_image(const fs::path& path) { return to_intensity(read_pnm(path)); }

// ---------------------------------------------------------------------------------------------
// Manifest

struct DatasetFrame {
  int id = 0;
  RigidTransform world_to_camera;
  int subsequence = 0;
  std::string split = "train";  // "train" or "test"
  std::string image_path;       // relative to the dataset root
  std::string depth_path;
  IntensityImage image;
  DepthMap depth;
};

struct Dataset {
  int version = kDatasetVersion;
  std::string scene_id;
  std::string family;
  double diameter = 1.0;
  CameraIntrinsics intrinsics;
  Json generator = Json::object();  // free-form record of how the data was made
  std::vector<DatasetFrame> frames;
  SparsePointSet points;

  const DatasetFrame* find(int id) const {
    for (const auto& f : frames)
      if (f.id == id) return &f;
    return nullptr;
  }

  /// Frames of one split (or all when empty), in manifest order.
  Trajectory trajectory(const std::string& split = {}) const {
    Trajectory t;
    t.intrinsics = intrinsics;
    for (const auto& f : frames)
      if (split.empty() || f.split == split) t.frames.push_back({f.id, f.world_to_camera, f.subsequence});
    return t;
  }
};

namespace detail {

// Typed field access that reports the JSON pointer of anything malformed.
class JsonCursor {
 public:
  JsonCursor(const Json& j, std::string where) : j_(j), where_(std::move(where)) {}

  const Json& json() const { return j_; }
  const std::string& where() const { return where_; }
  bool has(const char* key) const { return j_.is_object() && j_.contains(key); }

  JsonCursor at(const char* key) const {
    if (!j_.is_object()) fail("expected an object");
    auto it = j_.find(key);
    if (it == j_.end()) throw ParseError(where_ + "/" + key + ": missing field");
    return {*it, where_ + "/" + key};
  }
  JsonCursor at(std::size_t i) const { return {j_.at(i), where_ + "/" + std::to_string(i)}; }

  std::size_t array_size() const {
    if (!j_.is_array()) fail("expected an array");
    return j_.size();
  }
  double number() const {
    if (!j_.is_number()) fail("expected a number");
    return j_.get<double>();
  }
  long integer() const {
    if (!j_.is_number_integer()) fail("expected an integer");
    return j_.get<long>();
  }
  std::string string() const {
    if (!j_.is_string()) fail("expected a string");
    return j_.get<std::string>();
  }
  template <std::size_t N>
  std::array<double, N> numbers() const {
    if (array_size() != N) fail("expected " + std::to_string(N) + " numbers");
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = at(i).number();
    return out;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError((where_.empty() ? "/" : where_) + ": " + msg); }

 private:
  const Json& j_;
  std::string where_;
};

inline Json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ParseError(what + ": " + e.what());
  }
}

inline Json intrinsics_json(const CameraIntrinsics& K) {
  return {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"width", K.width}, {"height", K.height}};
}

inline CameraIntrinsics parse_intrinsics(const JsonCursor& c) {
  CameraIntrinsics K{c.at("fx").number(), c.at("fy").number(), c.at("cx").number(), c.at("cy").number(),
                     static_cast<int>(c.at("width").integer()), static_cast<int>(c.at("height").integer())};
  try {
    K.validate();
  } catch (const Error& e) {
    c.fail(e.what());
  }
  return K;
}

inline Json pose_json(const RigidTransform& T, Json frame) {
  const auto& q = T.rotation();
  frame["rotation_wxyz"] = {q.w(), q.x(), q.y(), q.z()};
  frame["translation"] = {T.translation().x(), T.translation().y(), T.translation().z()};
  return frame;
}

inline RigidTransform parse_pose(const JsonCursor& c) {
  const auto q = c.at("rotation_wxyz").numbers<4>();
  const auto t = c.at("translation").numbers<3>();
  const double norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (std::abs(norm - 1.0) > 1e-6) c.at("rotation_wxyz").fail("quaternion is not unit length");
  // Stored exactly as written so a round trip is bitwise.
  return RigidTransform::from_unit_quaternion(Eigen::Quaterniond(q[0], q[1], q[2], q[3]), Vec3(t[0], t[1], t[2]));
}

inline Json points_json(const SparsePointSet& points) {
  Json arr = Json::array();
  for (const auto& p : points.points) {
    Json obs = Json::array();
    for (const auto& o : p.observations) obs.push_back({{"frame", o.frame_id}, {"u", o.pixel.u}, {"v", o.pixel.v}});
    arr.push_back({{"id", p.id}, {"xyz", {p.xyz.x(), p.xyz.y(), p.xyz.z()}}, {"weight", p.weight}, {"observations", obs}});
  }
  return arr;
}

// Points referencing frames outside `frame_ids` are a referential-integrity failure.
inline SparsePointSet parse_points(const JsonCursor& c, const std::set<int>& frame_ids) {
  SparsePointSet out;
  std::set<int> seen;
  for (std::size_t i = 0; i < c.array_size(); ++i) {
    const JsonCursor pc = c.at(i);
    SparsePoint p;
    p.id = static_cast<int>(pc.at("id").integer());
    if (!seen.insert(p.id).second) pc.at("id").fail("duplicate point id " + std::to_string(p.id));
    const auto xyz = pc.at("xyz").numbers<3>();
    p.xyz = Vec3(xyz[0], xyz[1], xyz[2]);
    p.weight = pc.at("weight").number();
    if (!(p.weight >= 0.0)) pc.at("weight").fail("weight must be non-negative");
    const JsonCursor oc = pc.at("observations");
    for (std::size_t k = 0; k < oc.array_size(); ++k) {
      const JsonCursor o = oc.at(k);
      Observation ob{static_cast<int>(o.at("frame").integer()), {o.at("u").number(), o.at("v").number()}};
      if (!frame_ids.contains(ob.frame_id))
        throw ReferentialIntegrityError(o.where() + ": point " + std::to_string(p.id) + " references unknown frame " +
                                        std::to_string(ob.frame_id));
      p.observations.push_back(ob);
    }
    if (p.observations.size() < 2) oc.fail("a point needs at least 2 observations");
    out.points.push_back(std::move(p));
  }
  return out;
}

inline std::string frame_file(const char* dir, int id, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s/frame_%04d.%s", dir, id, ext);
  return buf;
}

// Parses everything except rasters. Frame paths are validated syntactically only.
inline Dataset parse_manifest(const Json& j) {
  const JsonCursor root(j, "");
  if (!j.is_object()) root.fail("manifest must be a JSON object");
  const long version = root.at("version").integer();
  if (version != kDatasetVersion)
    throw VersionError("manifest version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kDatasetVersion) + ")");
  Dataset d;
  d.version = static_cast<int>(version);
  const JsonCursor scene = root.at("scene");
  d.scene_id = scene.at("id").string();
  d.family = scene.at("family").string();
  d.diameter = scene.at("diameter").number();
  if (!(d.diameter > 0.0)) scene.at("diameter").fail("diameter must be positive");
  d.intrinsics = parse_intrinsics(root.at("intrinsics"));
  if (root.has("generator")) d.generator = j.at("generator");

  std::set<int> ids;
  const JsonCursor fc = root.at("frames");
  for (std::size_t i = 0; i < fc.array_size(); ++i) {
    const JsonCursor f = fc.at(i);
    DatasetFrame df;
    df.id = static_cast<int>(f.at("id").integer());
    if (!ids.insert(df.id).second) f.at("id").fail("duplicate frame id " + std::to_string(df.id));
    df.world_to_camera = parse_pose(f);
    df.subsequence = static_cast<int>(f.at("subsequence").integer());
    df.split = f.has("split") ? f.at("split").string() : "train";
    if (df.split != "train" && df.split != "test") f.at("split").fail("split must be 'train' or 'test'");
    if (f.has("image")) df.image_path = f.at("image").string();
    if (f.has("depth")) df.depth_path = f.at("depth").string();
    d.frames.push_back(std::move(df));
  }

  if (root.has("subsequences")) {
    const JsonCursor sc = root.at("subsequences");
    for (std::size_t i = 0; i < sc.array_size(); ++i) {
      const JsonCursor s = sc.at(i);
      const long sid = s.at("id").integer();
      const JsonCursor members = s.at("frames");
      for (std::size_t k = 0; k < members.array_size(); ++k) {
        const long fid = members.at(k).integer();
        const auto it = std::find_if(d.frames.begin(), d.frames.end(), [&](const DatasetFrame& f) { return f.id == fid; });
        if (it == d.frames.end())
          throw ReferentialIntegrityError(members.at(k).where() + ": unknown frame " + std::to_string(fid));
        if (it->subsequence != sid) members.at(k).fail("frame " + std::to_string(fid) + " is listed under the wrong subsequence");
      }
    }
  }
  d.points = parse_points(root.at("points"), ids);
  return d;
}

}  // namespace detail

/// Manifest JSON for a dataset (paths as stored in the frames).
inline Json manifest_json(const Dataset& d) {
  Json frames = Json::array();
  std::map<int, std::vector<int>> groups;
  for (const auto& f : d.frames) {
    Json fj = {{"id", f.id}, {"subsequence", f.subsequence}, {"split", f.split}};
    fj = detail::pose_json(f.world_to_camera, std::move(fj));
    if (!f.image_path.empty()) fj["image"] = f.image_path;
    if (!f.depth_path.empty()) fj["depth"] = f.depth_path;
    frames.push_back(std::move(fj));
    groups[f.subsequence].push_back(f.id);
  }
  Json subs = Json::array();
  for (const auto& [sid, ids] : groups) subs.push_back({{"id", sid}, {"frames", ids}});
  return {{"format", "endodepth-dataset"},
          {"version", d.version},
          {"scene", {{"id", d.scene_id}, {"family", d.family}, {"diameter", d.diameter}}},
          {"intrinsics", detail::intrinsics_json(d.intrinsics)},
          {"generator", d.generator},
          {"subsequences", subs},
          {"frames", frames},
          {"points", detail::points_json(d.points)}};
}

/// Writes the manifest and every frame's image and depth. Frames without explicit paths get the
/// default images/ and depth/ names, which are recorded back into `d`.
inline void write_dataset(Dataset& d, const fs::path& root) {
  fs::create_directories(root);
  for (auto& f : d.frames) {
    if (!f.image.empty()) {
      if (f.image_path.empty()) f.image_path = detail::frame_file("images", f.id, "pgm");
      write_pgm(root / f.image_path, f.image);
    }
    if (!f.depth.empty()) {
      if (f.depth_path.empty()) f.depth_path = detail::frame_file("depth", f.id, "pfm");
      write_pfm(root / f.depth_path, f.depth);
    }
  }
  detail::write_file_bytes(root / kManifestName, manifest_json(d).dump(2) + "\n");
}

inline Dataset read_dataset(const fs::path& root) {
  const fs::path manifest = root / kManifestName;
  if (!fs::is_regular_file(manifest)) throw ManifestError("missing manifest " + manifest.string());
  Dataset d = detail::parse_manifest(detail::parse_json_text(detail::read_file_bytes(manifest), manifest.string()));
  auto load = [&](const std::string& rel, int id, auto reader) {
    const fs::path p = root / rel;
    if (!fs::is_regular_file(p))
      throw ManifestError("frame " + std::to_string(id) + " references missing file " + p.string());
    auto r = reader(p);
    if (r.width() != d.intrinsics.width || r.height() != d.intrinsics.height)
      throw ParseError(p.string() + ": raster size " + std::to_string(r.width()) + "x" + std::to_string(r.height()) +
                       " does not match the intrinsics");
    return r;
  };
  for (auto& f : d.frames) {
    if (!f.image_path.empty()) f.image = load(f.image_path, f.id, [](const fs::path& p) { return read_image(p); });
    if (!f.depth_path.empty()) f.depth = load(f.depth_path, f.id, [](const fs::path& p) { return read_pfm(p); });
  }
  return d;
}

/// Loads camera poses and sparse points from a manifest-format JSON file (rasters not required),
/// e.g. the output of an external reconstruction converted to this schema.
inline std::pair<Trajectory, SparsePointSet> import_sparse_reconstruction(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ManifestError("missing reconstruction file " + path.string());
  const Dataset d = detail::parse_manifest(detail::parse_json_text(detail::read_file_bytes(path), path.string()));
  return {d.trajectory(), d.points};
}

}  // namespace endodepth
