#include "ltp/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace ltp {

using nlohmann::json;

void DatasetManifest::validate() const {
    if (num_classes < 1) throw ValidationError("manifest must declare at least one class");
    std::set<int64_t> ids;
    for (const ImageRecord& im : images) {
        if (!ids.insert(im.image_id).second)
            throw ValidationError("duplicate image_id " + std::to_string(im.image_id));
        if (im.width <= 0 || im.height <= 0)
            throw ValidationError("image " + std::to_string(im.image_id) + " has empty extent");
        if (im.has_pixels())
            require_shape(im.pixels, {3, im.height, im.width}, "image pixels");
        for (const Annotation& a : im.annotations) {
            if (a.category_id < 0 || a.category_id >= num_classes)
                throw ValidationError("annotation category " + std::to_string(a.category_id) +
                                      " outside [0," + std::to_string(num_classes) + ")");
            if (!a.box.valid())
                throw ValidationError("degenerate box in image " + std::to_string(im.image_id));
            if (a.box.x0 < 0 || a.box.y0 < 0 || a.box.x1 > im.width || a.box.y1 > im.height)
                throw ValidationError("box outside image " + std::to_string(im.image_id));
        }
    }
}

// --- base64 (needed for the embedded pixel payload) --------------------------

namespace {

const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(const unsigned char* data, size_t n) {
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (size_t i = 0; i < n; i += 3) {
        unsigned v = data[i] << 16;
        if (i + 1 < n) v |= data[i + 1] << 8;
        if (i + 2 < n) v |= data[i + 2];
        out.push_back(kB64[(v >> 18) & 63]);
        out.push_back(kB64[(v >> 12) & 63]);
        out.push_back(i + 1 < n ? kB64[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < n ? kB64[v & 63] : '=');
    }
    return out;
}

std::vector<unsigned char> b64_decode(const std::string& s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    int buf = 0, bits = 0;
    for (char c : s) {
        if (c == '=') break;
        int v = val(c);
        if (v < 0) throw FormatError("invalid base64 character in pixel payload");
        buf = (buf << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buf >> bits) & 0xff));
        }
    }
    return out;
}

std::string encode_pixels(const Tensor& pixels) {
    std::vector<unsigned char> raw(pixels.numel() * 4);
    for (int64_t i = 0; i < pixels.numel(); ++i) {
        float f = static_cast<float>(pixels[i]);
        std::memcpy(raw.data() + i * 4, &f, 4);
    }
    return b64_encode(raw.data(), raw.size());
}

Tensor decode_pixels(const std::string& b64, int h, int w) {
    std::vector<unsigned char> raw = b64_decode(b64);
    int64_t n = static_cast<int64_t>(3) * h * w;
    if (static_cast<int64_t>(raw.size()) != n * 4)
        throw FormatError("pixel payload size " + std::to_string(raw.size()) +
                          " does not match 3x" + std::to_string(h) + "x" + std::to_string(w));
    Tensor t({3, h, w});
    for (int64_t i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, raw.data() + i * 4, 4);
        t[i] = static_cast<double>(f);
    }
    return t;
}

}  // namespace

// --- COCO-style ingestion -----------------------------------------------------

namespace {

LoadResult parse_coco(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError("coco json parse failure at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    if (!doc.contains("images") || !doc.contains("annotations") || !doc.contains("categories"))
        throw FormatError("coco json must contain images, annotations and categories");

    // categories may have arbitrary ids; map to contiguous [0, C) by ascending id
    std::map<int64_t, int> cat_map;
    std::vector<std::string> names;
    for (const auto& c : doc["categories"]) cat_map[c.at("id").get<int64_t>()] = 0;
    int next = 0;
    for (auto& [id, slot] : cat_map) slot = next++;
    names.resize(cat_map.size());
    for (const auto& c : doc["categories"]) {
        int slot = cat_map[c.at("id").get<int64_t>()];
        names[static_cast<size_t>(slot)] = c.value("name", std::string());
    }

    LoadResult res;
    res.manifest.num_classes = next;
    res.manifest.class_names = std::move(names);

    std::map<int64_t, size_t> image_index;
    for (const auto& im : doc["images"]) {
        ImageRecord rec;
        rec.image_id = im.at("id").get<int64_t>();
        rec.width = im.at("width").get<int>();
        rec.height = im.at("height").get<int>();
        image_index[rec.image_id] = res.manifest.images.size();
        res.manifest.images.push_back(std::move(rec));
    }

    std::set<int64_t> unknown_cats;
    for (const auto& a : doc["annotations"]) {
        int64_t cat = a.at("category_id").get<int64_t>();
        auto it = cat_map.find(cat);
        if (it == cat_map.end()) {
            unknown_cats.insert(cat);
            continue;
        }
        int64_t img = a.at("image_id").get<int64_t>();
        auto im_it = image_index.find(img);
        if (im_it == image_index.end())
            throw ValidationError("annotation references unknown image_id " + std::to_string(img));
        const auto& bb = a.at("bbox");
        double x = bb.at(0).get<double>(), y = bb.at(1).get<double>();
        double w = bb.at(2).get<double>(), h = bb.at(3).get<double>();
        if (w <= 0 || h <= 0) {
            ++res.dropped_annotations;
            continue;
        }
        ImageRecord& rec = res.manifest.images[im_it->second];
        BoundingBox box = BoundingBox{x, y, x + w, y + h}.clipped(rec.width, rec.height);
        if (!box.valid()) {
            ++res.dropped_annotations;
            continue;
        }
        rec.annotations.push_back({box, it->second});
    }
    if (!unknown_cats.empty()) {
        std::string ids;
        for (int64_t c : unknown_cats) ids += (ids.empty() ? "" : ", ") + std::to_string(c);
        throw ValidationError("annotations reference unknown category ids: " + ids);
    }
    res.manifest.validate();
    return res;
}

json box_to_json(const BoundingBox& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

BoundingBox box_from_json(const json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

LoadResult parse_internal(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    size_t lineno = 0;
    LoadResult res;
    bool have_header = false;
    size_t offset = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t line_start = offset;
        offset += line.size() + 1;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError("manifest line " + std::to_string(lineno) + " parse failure at byte " +
                              std::to_string(line_start + e.byte) + ": " + e.what());
        }
        if (!have_header) {
            if (rec.value("format", std::string()) != "ltp-manifest-v1")
                throw FormatError("manifest header missing or wrong format tag on line 1");
            res.manifest.num_classes = rec.at("num_classes").get<int>();
            if (rec.contains("class_names"))
                res.manifest.class_names = rec["class_names"].get<std::vector<std::string>>();
            have_header = true;
            continue;
        }
        ImageRecord im;
        im.image_id = rec.at("image_id").get<int64_t>();
        im.width = rec.at("width").get<int>();
        im.height = rec.at("height").get<int>();
        if (rec.contains("pixels"))
            im.pixels = decode_pixels(rec["pixels"].get<std::string>(), im.height, im.width);
        for (const auto& a : rec.at("annotations")) {
            BoundingBox box = box_from_json(a.at("box"));
            if (!box.valid()) {
                ++res.dropped_annotations;
                continue;
            }
            im.annotations.push_back({box, a.at("category_id").get<int>()});
        }
        res.manifest.images.push_back(std::move(im));
    }
    if (!have_header) throw FormatError("manifest is empty (no header line)");
    res.manifest.validate();
    return res;
}

}  // namespace

LoadResult parse_manifest(const std::string& text, ManifestFormat format) {
    return format == ManifestFormat::CocoJson ? parse_coco(text) : parse_internal(text);
}

LoadResult load_manifest(const std::string& path, ManifestFormat format) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open manifest file " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    LoadResult res = parse_manifest(ss.str(), format);
    if (res.dropped_annotations > 0)
        std::fprintf(stderr, "[ltp] %s: dropped %lld degenerate annotation(s)\n", path.c_str(),
                     static_cast<long long>(res.dropped_annotations));
    return res;
}

std::string serialize_manifest(const DatasetManifest& m) {
    std::ostringstream os;
    json header;
    header["format"] = "ltp-manifest-v1";
    header["num_classes"] = m.num_classes;
    if (!m.class_names.empty()) header["class_names"] = m.class_names;
    os << header.dump() << "\n";
    for (const ImageRecord& im : m.images) {
        json rec;
        rec["image_id"] = im.image_id;
        rec["width"] = im.width;
        rec["height"] = im.height;
        if (im.has_pixels()) rec["pixels"] = encode_pixels(im.pixels);
        json anns = json::array();
        for (const Annotation& a : im.annotations) {
            json aj;
            aj["category_id"] = a.category_id;
            aj["box"] = box_to_json(a.box);
            anns.push_back(std::move(aj));
        }
        rec["annotations"] = std::move(anns);
        os << rec.dump() << "\n";
    }
    return os.str();
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write manifest file " + path);
    f << serialize_manifest(m);
}

// --- synthetic data -----------------------------------------------------------

namespace {

// dyadic, non-gray colors so float32 round-trips are exact and shapes separate
// from the gray background
std::vector<std::array<double, 3>> make_palette(int count) {
    const double levels[] = {0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<std::array<double, 3>> palette;
    for (double r : levels)
        for (double g : levels)
            for (double b : levels) {
                double mx = std::max({r, g, b}), mn = std::min({r, g, b});
                if (mx - mn >= 0.5) palette.push_back({r, g, b});
            }
    if (count > static_cast<int>(palette.size()))
        throw ConfigError("too many classes for the color palette (" +
                          std::to_string(palette.size() * 3) + " classes max)");
    palette.resize(static_cast<size_t>(count));
    return palette;
}

enum class ShapeKind { Square, Circle, Triangle };

void draw_shape(Tensor& img, int W, int H, ShapeKind kind, double cx, double cy, double half,
                const std::array<double, 3>& color) {
    int x_lo = std::max(0, static_cast<int>(std::floor(cx - half)));
    int x_hi = std::min(W - 1, static_cast<int>(std::ceil(cx + half)));
    int y_lo = std::max(0, static_cast<int>(std::floor(cy - half)));
    int y_hi = std::min(H - 1, static_cast<int>(std::ceil(cy + half)));
    for (int y = y_lo; y <= y_hi; ++y) {
        for (int x = x_lo; x <= x_hi; ++x) {
            double px = x + 0.5 - cx, py = y + 0.5 - cy;
            bool inside = false;
            switch (kind) {
                case ShapeKind::Square:
                    inside = std::abs(px) <= half && std::abs(py) <= half;
                    break;
                case ShapeKind::Circle:
                    inside = px * px + py * py <= half * half;
                    break;
                case ShapeKind::Triangle:
                    // apex up: vertices (0,-h), (-h,h), (h,h) in centered coords
                    inside = py >= -half && py <= half && std::abs(px) <= (py + half) / 2.0;
                    break;
            }
            if (inside)
                for (int c = 0; c < 3; ++c)
                    img[(static_cast<int64_t>(c) * H + y) * W + x] = color[static_cast<size_t>(c)];
        }
    }
}

}  // namespace

DatasetManifest generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (cfg.num_images < cfg.num_classes)
        throw ConfigError("num_images must be >= num_classes");
    if (cfg.zipf_exponent < 0) throw ConfigError("zipf_exponent must be >= 0");
    const int min_side = 8;
    if (cfg.image_size < min_side + 4)
        throw ConfigError("image_size " + std::to_string(cfg.image_size) +
                          " too small to place a shape (need >= " + std::to_string(min_side + 4) + ")");

    int C = cfg.num_classes;
    int n_colors = (C + 2) / 3;
    auto palette = make_palette(n_colors);

    // zipf over class ranks; class index == rank (0 most frequent)
    std::vector<double> cum(static_cast<size_t>(C));
    double z = 0;
    for (int c = 0; c < C; ++c) {
        z += std::pow(static_cast<double>(c + 1), -cfg.zipf_exponent);
        cum[static_cast<size_t>(c)] = z;
    }
    for (double& v : cum) v /= z;

    const double grays[] = {0.375, 0.4375, 0.5, 0.5625, 0.625};
    Rng rng(cfg.seed);
    DatasetManifest m;
    m.num_classes = C;
    m.class_names.reserve(static_cast<size_t>(C));
    const char* kind_names[] = {"square", "circle", "triangle"};
    for (int c = 0; c < C; ++c)
        m.class_names.push_back(std::string(kind_names[c % 3]) + "_" + std::to_string(c / 3));

    int W = cfg.image_size, H = cfg.image_size;
    for (int i = 0; i < cfg.num_images; ++i) {
        ImageRecord rec;
        rec.image_id = i;
        rec.width = W;
        rec.height = H;
        double bg = grays[rng.uniform_int(5)];
        rec.pixels = Tensor::full({3, H, W}, bg);

        int span = cfg.max_shapes_per_image - cfg.min_shapes_per_image + 1;
        int n_shapes = cfg.min_shapes_per_image + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(span)));
        for (int sidx = 0; sidx < n_shapes; ++sidx) {
            double u = rng.uniform();
            int cls = static_cast<int>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
            cls = std::min(cls, C - 1);

            int max_side = std::min(W - 2, std::max(min_side, W / 2));
            int side = min_side + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_side - min_side + 1)));
            int x0 = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(W - side - 1)));
            int y0 = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(H - side - 1)));
            double half = side / 2.0;
            double cx = x0 + half, cy = y0 + half;
            ShapeKind kind = static_cast<ShapeKind>(cls % 3);
            draw_shape(rec.pixels, W, H, kind, cx, cy, half, palette[static_cast<size_t>(cls / 3)]);
            rec.annotations.push_back({BoundingBox{static_cast<double>(x0), static_cast<double>(y0),
                                                   static_cast<double>(x0 + side),
                                                   static_cast<double>(y0 + side)},
                                       cls});
        }
        m.images.push_back(std::move(rec));
    }
    m.validate();
    return m;
}

ClassStats compute_class_stats(const DatasetManifest& m) {
    if (m.images.empty()) throw DomainError("class stats of an empty manifest are undefined");
    size_t C = static_cast<size_t>(m.num_classes);
    ClassStats s;
    s.f_im.assign(C, 0.0);
    s.f_in.assign(C, 0.0);
    s.images_with.assign(C, 0);
    s.instances.assign(C, 0);
    s.num_images = static_cast<int64_t>(m.images.size());
    for (const ImageRecord& im : m.images) {
        std::set<int> present;
        for (const Annotation& a : im.annotations) {
            ++s.instances[static_cast<size_t>(a.category_id)];
            present.insert(a.category_id);
        }
        s.num_instances += static_cast<int64_t>(im.annotations.size());
        for (int c : present) ++s.images_with[static_cast<size_t>(c)];
    }
    for (size_t c = 0; c < C; ++c) {
        s.f_im[c] = static_cast<double>(s.images_with[c]) / static_cast<double>(s.num_images);
        if (s.num_instances > 0)
            s.f_in[c] = static_cast<double>(s.instances[c]) / static_cast<double>(s.num_instances);
    }
    return s;
}

}  // namespace ltp
