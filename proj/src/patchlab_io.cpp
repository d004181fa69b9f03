#include "matattr/patchlab.hpp"

#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

namespace matattr::patchlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Image load_ppm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    if (!(in >> v)) fail(ErrorKind::Parse, "malformed PPM header in " + path.string());
    return v;
  };
  if (magic != "P6" && magic != "P3") fail(ErrorKind::Parse, "unsupported image format in " + path.string());
  const int w = next_int(), h = next_int(), maxval = next_int();
  require(w > 0 && h > 0 && maxval > 0 && maxval < 256, ErrorKind::Parse, "bad PPM dimensions in " + path.string());
  Image img(w, h);
  if (magic == "P6") {
    in.get();
    std::vector<unsigned char> buf(static_cast<std::size_t>(3 * w * h));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    require(in.gcount() == static_cast<std::streamsize>(buf.size()), ErrorKind::Parse,
            "truncated PPM data in " + path.string());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          img.ch[c](y, x) = buf[static_cast<std::size_t>(3 * (y * w + x) + c)] / static_cast<double>(maxval);
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) img.ch[c](y, x) = next_int() / static_cast<double>(maxval);
  }
  return img;
}

Image load_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    fail(ErrorKind::Parse, "cannot decode PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorKind::Parse, "cannot decode PNG " + path.string() + ": " + image.message);
  }
  const int w = static_cast<int>(image.width), h = static_cast<int>(image.height);
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.ch[c](y, x) = buf[static_cast<std::size_t>(3 * (y * w + x) + c)] / 255.0;
  return img;
}

std::string encode(const std::vector<png_byte>& data, int w, int h, bool gray) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, data.data(), 0, nullptr))
    fail(ErrorKind::Io, std::string("PNG encode failed: ") + image.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, data.data(), 0, nullptr))
    fail(ErrorKind::Io, std::string("PNG encode failed: ") + image.message);
  out.resize(size);
  return out;
}

void write_png(const fs::path& path, const std::vector<png_byte>& data, int w, int h, bool gray) {
  write_file_atomic(path, encode(data, w, h, gray));
}

png_byte to_byte(double v) { return static_cast<png_byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

class Reader {
 public:
  Reader(std::string bytes, std::string name) : bytes_(std::move(bytes)), name_(std::move(name)) {}
  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) fail(ErrorKind::Parse, "truncated feature file " + name_);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::uint16_t u16() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(2));
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace

Image load_image(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::Io, "missing image file " + path.string());
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return load_png(path);
  return load_ppm(path);
}

void save_ppm(const fs::path& path, const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(image.ch[c](y, x))));
  write_file_atomic(path, out);
}

std::string encode_png(const Image& image) {
  std::vector<png_byte> data;
  data.reserve(static_cast<std::size_t>(3 * image.width() * image.height()));
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c) data.push_back(to_byte(image.ch[c](y, x)));
  return encode(data, image.width(), image.height(), false);
}

void save_png(const fs::path& path, const Image& image) { write_file_atomic(path, encode_png(image)); }

void save_png_gray(const fs::path& path, const Eigen::ArrayXXd& plane) {
  std::vector<png_byte> data;
  for (Index y = 0; y < plane.rows(); ++y)
    for (Index x = 0; x < plane.cols(); ++x) data.push_back(to_byte(plane(y, x)));
  write_png(path, data, static_cast<int>(plane.cols()), static_cast<int>(plane.rows()), true);
}

Dataset load_dataset(const fs::path& index_path) {
  std::ifstream in(index_path);
  if (!in) fail(ErrorKind::Io, "cannot open patch index " + index_path.string());
  const fs::path base = index_path.parent_path();

  struct Row {
    std::string id, image, category, region, split;
    BBox bbox;
    std::size_t line;
  };
  std::vector<Row> rows;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
      Row r;
      r.id = j.at("id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      r.category = j.at("category").get<std::string>();
      const auto box = j.at("bbox").get<std::vector<int>>();
      if (box.size() != 4) throw std::invalid_argument("bbox must have 4 entries");
      r.bbox = {box[0], box[1], box[2], box[3]};
      r.region = j.value("region", r.id);
      r.split = j.value("split", std::string());
      r.line = lineno;
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      fail(ErrorKind::Parse, index_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }

  Dataset ds;
  std::set<std::string> names;
  for (const Row& r : rows) names.insert(r.category);
  ds.categories.assign(names.begin(), names.end());

  std::map<std::string, Image> cache;
  for (const Row& r : rows) {
    auto it = cache.find(r.image);
    if (it == cache.end()) {
      try {
        it = cache.emplace(r.image, load_image(base / r.image)).first;
      } catch (const Error& e) {
        fail(e.kind(), "patch " + r.id + " (line " + std::to_string(r.line) + "): " + e.what());
      }
    }
    const Image& img = it->second;
    const BBox& b = r.bbox;
    if (b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0 || b.x + b.w > img.width() || b.y + b.h > img.height())
      fail(ErrorKind::OutOfRange, "patch " + r.id + " (line " + std::to_string(r.line) +
                                      "): bbox out of range for image " + std::to_string(img.width()) + "x" +
                                      std::to_string(img.height()));
    if (b.w != b.h)
      fail(ErrorKind::InvalidInput, "patch " + r.id + " (line " + std::to_string(r.line) + "): bbox not square");
    Patch p;
    p.id = r.id;
    p.source_image = r.image;
    p.bbox = b;
    p.category = static_cast<int>(std::lower_bound(ds.categories.begin(), ds.categories.end(), r.category) -
                                  ds.categories.begin());
    p.region = r.region;
    p.split = r.split;
    p.pixels = img.crop(b.x, b.y, b.w, b.h);
    ds.patches.push_back(std::move(p));
  }
  return ds;
}

void save_dataset(const fs::path& dir, const Dataset& dataset) {
  fs::create_directories(dir / "images");
  std::string index;
  for (const Patch& p : dataset.patches) {
    const std::string rel = "images/" + p.id + ".ppm";
    save_ppm(dir / rel, p.pixels);
    json j = {{"id", p.id},
              {"image", rel},
              {"bbox", {0, 0, p.pixels.width(), p.pixels.height()}},
              {"category", dataset.categories.at(static_cast<std::size_t>(p.category))}};
    if (!p.region.empty()) j["region"] = p.region;
    if (!p.split.empty()) j["split"] = p.split;
    index += j.dump() + "\n";
  }
  write_file_atomic(dir / "index.jsonl", index);
}

void write_features(const fs::path& path, const std::vector<FeatureVector>& features) {
  const std::uint32_t d = features.empty() ? 0u : static_cast<std::uint32_t>(features.front().values.size());
  std::string out = "PATFEAT1";
  put_u32(out, static_cast<std::uint32_t>(features.size()));
  put_u32(out, d);
  for (const FeatureVector& f : features) {
    require_dims(f.values.size(), d, "feature dimension of " + f.patch_id);
    require(f.patch_id.size() <= 0xFFFF, ErrorKind::InvalidInput, "patch id too long");
    put_u16(out, static_cast<std::uint16_t>(f.patch_id.size()));
    out += f.patch_id;
    for (Index i = 0; i < f.values.size(); ++i) {
      const float v = static_cast<float>(f.values(i));
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(out, bits);
    }
  }
  write_file_atomic(path, out);
}

std::vector<FeatureVector> read_features(const fs::path& path, const std::string& descriptor_id) {
  Reader r(read_file(path), path.string());
  if (std::string(r.take(8), 8) != "PATFEAT1") fail(ErrorKind::Parse, "bad magic in feature file " + path.string());
  const std::uint32_t count = r.u32(), d = r.u32();
  std::vector<FeatureVector> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureVector f;
    const std::uint16_t len = r.u16();
    f.patch_id.assign(r.take(len), len);
    f.values.resize(d);
    for (std::uint32_t j = 0; j < d; ++j) {
      const std::uint32_t bits = r.u32();
      float v;
      std::memcpy(&v, &bits, 4);
      f.values(j) = v;
    }
    f.descriptor_id = descriptor_id;
    out.push_back(std::move(f));
  }
  if (!r.done()) fail(ErrorKind::Parse, "trailing bytes in feature file " + path.string());
  return out;
}

std::string features_to_csv(const std::vector<FeatureVector>& features) {
  std::string out = "id";
  const Index d = features.empty() ? 0 : features.front().values.size();
  for (Index i = 0; i < d; ++i) out += ",f" + std::to_string(i);
  out += "\n";
  for (const FeatureVector& f : features) {
    out += f.patch_id;
    for (Index i = 0; i < f.values.size(); ++i) out += "," + format_float(static_cast<float>(f.values(i)));
    out += "\n";
  }
  return out;
}

}  // namespace matattr::patchlab
