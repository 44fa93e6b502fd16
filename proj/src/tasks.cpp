#include "mnas/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "mnas/common.hpp"

namespace mnas {

int default_train_classes(int n_classes) {
    if (n_classes <= 1) {
        return n_classes;
    }
    const int test = std::max(1, n_classes / 5);
    return n_classes - test;
}

namespace {

struct Stroke {
    bool is_arc = false;
    // line: (x0,y0)-(x1,y1); arc: center (x0,y0), radius r, angles [a0, a0+span]
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double r = 0, a0 = 0, span = 0;
};

double dist_to_segment(double px, double py, const Stroke& s) {
    const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double cx = s.x0 + t * dx, cy = s.y0 + t * dy;
    return std::hypot(px - cx, py - cy);
}

double dist_to_arc(double px, double py, const Stroke& s) {
    const double vx = px - s.x0, vy = py - s.y0;
    double ang = std::atan2(vy, vx) - s.a0;
    ang = std::fmod(ang, 2.0 * M_PI);
    if (ang < 0) {
        ang += 2.0 * M_PI;
    }
    if (ang <= s.span) {
        return std::fabs(std::hypot(vx, vy) - s.r);
    }
    // outside the angular span: nearest endpoint
    const double ex0 = s.x0 + s.r * std::cos(s.a0), ey0 = s.y0 + s.r * std::sin(s.a0);
    const double ex1 = s.x0 + s.r * std::cos(s.a0 + s.span),
                 ey1 = s.y0 + s.r * std::sin(s.a0 + s.span);
    return std::min(std::hypot(px - ex0, py - ey0), std::hypot(px - ex1, py - ey1));
}

// Stroke endpoints snap to a shared 4x4 anchor grid and arcs to a small
// radius/angle vocabulary, so classes share stroke parts and differ in their
// combination. That keeps single-pixel template matching from trivializing
// the task while leaving classes well separated.
std::vector<Stroke> make_template(Rng& rng) {
    auto anchor = [&](double& x, double& y) {
        x = 0.2 + 0.2 * rng.uniform_int(4);
        y = 0.2 + 0.2 * rng.uniform_int(4);
    };
    const int n_strokes = 3 + rng.uniform_int(4);  // 3..6
    std::vector<Stroke> strokes;
    strokes.reserve(static_cast<size_t>(n_strokes));
    for (int i = 0; i < n_strokes; ++i) {
        Stroke s;
        s.is_arc = rng.uniform() < 0.4;
        if (s.is_arc) {
            anchor(s.x0, s.y0);
            s.r = 0.12 + 0.08 * rng.uniform_int(3);
            s.a0 = (M_PI / 2.0) * rng.uniform_int(4);
            s.span = M_PI * (0.5 + 0.5 * rng.uniform_int(3));
        } else {
            anchor(s.x0, s.y0);
            do {
                anchor(s.x1, s.y1);
            } while (s.x1 == s.x0 && s.y1 == s.y0);
        }
        strokes.push_back(s);
    }
    return strokes;
}

std::vector<Stroke> jitter_template(const std::vector<Stroke>& strokes, Rng& rng) {
    const double max_rot = 15.0 * M_PI / 180.0;
    const double theta = rng.uniform(-max_rot, max_rot);
    const double tx = rng.uniform(-0.1, 0.1);
    const double ty = rng.uniform(-0.1, 0.1);
    const double c = std::cos(theta), sn = std::sin(theta);
    auto warp = [&](double& x, double& y) {
        const double dx = x - 0.5, dy = y - 0.5;
        x = 0.5 + c * dx - sn * dy + tx;
        y = 0.5 + sn * dx + c * dy + ty;
    };
    std::vector<Stroke> out = strokes;
    for (Stroke& s : out) {
        warp(s.x0, s.y0);
        if (s.is_arc) {
            s.a0 += theta;
        } else {
            warp(s.x1, s.y1);
        }
    }
    return out;
}

std::vector<double> render(const std::vector<Stroke>& strokes, int size, Rng& noise_rng) {
    const double width = 0.75 / size;  // stroke half-width in normalized units
    std::vector<double> img(static_cast<size_t>(size) * size);
    for (int r = 0; r < size; ++r) {
        const double py = (r + 0.5) / size;
        for (int col = 0; col < size; ++col) {
            const double px = (col + 0.5) / size;
            double best = 1e9;
            for (const Stroke& s : strokes) {
                const double d = s.is_arc ? dist_to_arc(px, py, s) : dist_to_segment(px, py, s);
                best = std::min(best, d);
            }
            double v = std::exp(-(best * best) / (2.0 * width * width * 4.0));
            v += noise_rng.normal(0.0, 0.05);
            img[static_cast<size_t>(r) * size + col] = std::clamp(v, 0.0, 1.0);
        }
    }
    return img;
}

}  // namespace

ClassDataset generate_synthetic_glyphs(uint64_t seed, int n_classes, int per_class, int size) {
    if (size < 8) {
        throw std::invalid_argument("glyph size must be >= 8");
    }
    if (per_class < 2) {
        throw std::invalid_argument("need >= 2 images per class");
    }
    if (n_classes < 1) {
        throw std::invalid_argument("need >= 1 class");
    }
    ClassDataset ds;
    ds.height = size;
    ds.width = size;
    ds.train_classes = default_train_classes(n_classes);
    ds.classes.resize(static_cast<size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
        Rng class_rng(hash_mix(hash_str(seed, "glyph-class"), static_cast<uint64_t>(c)));
        const std::vector<Stroke> tmpl = make_template(class_rng);
        auto& images = ds.classes[static_cast<size_t>(c)];
        images.reserve(static_cast<size_t>(per_class));
        for (int i = 0; i < per_class; ++i) {
            Rng sample_rng(hash_mix(hash_mix(hash_str(seed, "glyph-sample"),
                                             static_cast<uint64_t>(c)),
                                    static_cast<uint64_t>(i)));
            images.push_back(render(jitter_template(tmpl, sample_rng), size, sample_rng));
        }
    }
    return ds;
}

namespace {

constexpr char kMagic[4] = {'F', 'S', 'D', 'S'};
constexpr uint32_t kFsdsVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) {
        throw FormatError(FormatError::Kind::Truncated, "FSDS: file ends inside the header");
    }
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_dataset(const ClassDataset& dataset, const std::string& path) {
    const int n_classes = dataset.n_classes();
    if (n_classes == 0) {
        throw std::invalid_argument("FSDS: refusing to save an empty dataset");
    }
    const size_t per_class = dataset.classes[0].size();
    for (const auto& cls : dataset.classes) {
        if (cls.size() != per_class) {
            throw std::invalid_argument("FSDS: all classes must have the same image count");
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("FSDS: cannot open for writing: " + path);
    }
    out.write(kMagic, 4);
    write_u32(out, kFsdsVersion);
    write_u32(out, static_cast<uint32_t>(n_classes));
    write_u32(out, static_cast<uint32_t>(per_class));
    write_u32(out, static_cast<uint32_t>(dataset.height));
    write_u32(out, static_cast<uint32_t>(dataset.width));
    std::vector<unsigned char> row(static_cast<size_t>(dataset.height) * dataset.width);
    for (const auto& cls : dataset.classes) {
        for (const auto& img : cls) {
            for (size_t i = 0; i < img.size(); ++i) {
                row[i] = static_cast<unsigned char>(
                    std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
            }
            out.write(reinterpret_cast<const char*>(row.data()),
                      static_cast<std::streamsize>(row.size()));
        }
    }
    if (!out) {
        throw std::runtime_error("FSDS: write failed: " + path);
    }
}

ClassDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("FSDS: cannot open: " + path);
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(FormatError::Kind::BadMagic, "FSDS: bad magic");
    }
    const uint32_t version = read_u32(in);
    if (version != kFsdsVersion) {
        throw FormatError(FormatError::Kind::BadVersion,
                          "FSDS: unsupported version " + std::to_string(version));
    }
    const uint32_t n_classes = read_u32(in);
    const uint32_t per_class = read_u32(in);
    const uint32_t height = read_u32(in);
    const uint32_t width = read_u32(in);
    if (n_classes == 0 || per_class == 0 || height == 0 || width == 0) {
        throw FormatError(FormatError::Kind::CountMismatch, "FSDS: zero-sized header field");
    }

    ClassDataset ds;
    ds.height = static_cast<int>(height);
    ds.width = static_cast<int>(width);
    ds.train_classes = default_train_classes(static_cast<int>(n_classes));
    ds.classes.resize(n_classes);
    const size_t pixels = static_cast<size_t>(height) * width;
    std::vector<unsigned char> buf(pixels);
    for (uint32_t c = 0; c < n_classes; ++c) {
        auto& cls = ds.classes[c];
        cls.reserve(per_class);
        for (uint32_t i = 0; i < per_class; ++i) {
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
            if (static_cast<size_t>(in.gcount()) != pixels) {
                throw FormatError(FormatError::Kind::Truncated,
                                  "FSDS: header claims more images than the file holds");
            }
            std::vector<double> img(pixels);
            for (size_t k = 0; k < pixels; ++k) {
                img[k] = buf[k] / 255.0;
            }
            cls.push_back(std::move(img));
        }
    }
    in.peek();
    if (!in.eof()) {
        throw FormatError(FormatError::Kind::CountMismatch,
                          "FSDS: trailing bytes beyond the declared image count");
    }
    return ds;
}

Episode sample_episode(const ClassDataset& dataset, Split split, int n_way, int k_shot,
                       int query_per_class, Rng& rng) {
    if (n_way < 2 || k_shot < 1 || query_per_class < 1) {
        throw std::invalid_argument("episode: need n_way >= 2, k_shot >= 1, query >= 1");
    }
    const int pool_size = dataset.split_size(split);
    if (pool_size < n_way) {
        throw std::invalid_argument("episode: split has " + std::to_string(pool_size) +
                                    " classes, need " + std::to_string(n_way));
    }
    std::vector<int> pool(static_cast<size_t>(pool_size));
    for (int i = 0; i < pool_size; ++i) {
        pool[static_cast<size_t>(i)] = dataset.split_begin(split) + i;
    }
    // partial Fisher-Yates: first n_way entries are the episode's classes
    for (int i = 0; i < n_way; ++i) {
        const int j = i + rng.uniform_int(pool_size - i);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }

    std::vector<int> labels(static_cast<size_t>(n_way));
    for (int i = 0; i < n_way; ++i) {
        labels[static_cast<size_t>(i)] = i;
    }
    rng.shuffle(labels);

    Episode ep;
    ep.n_way = n_way;
    ep.k_shot = k_shot;
    ep.query_per_class = query_per_class;
    const size_t pixels = static_cast<size_t>(dataset.height) * dataset.width;
    const int need = k_shot + query_per_class;
    std::vector<double> support_data, query_data;
    support_data.reserve(static_cast<size_t>(n_way) * k_shot * pixels);
    query_data.reserve(static_cast<size_t>(n_way) * query_per_class * pixels);

    for (int slot = 0; slot < n_way; ++slot) {
        const auto& images = dataset.classes[static_cast<size_t>(pool[static_cast<size_t>(slot)])];
        if (static_cast<int>(images.size()) < need) {
            throw std::invalid_argument("episode: class has " + std::to_string(images.size()) +
                                        " images, need " + std::to_string(need));
        }
        std::vector<int> idx(images.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            idx[i] = static_cast<int>(i);
        }
        for (int i = 0; i < need; ++i) {
            const int j = i + rng.uniform_int(static_cast<int>(idx.size()) - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        const int label = labels[static_cast<size_t>(slot)];
        for (int i = 0; i < k_shot; ++i) {
            const auto& img = images[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            support_data.insert(support_data.end(), img.begin(), img.end());
            ep.support_y.push_back(label);
        }
        for (int i = k_shot; i < need; ++i) {
            const auto& img = images[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            query_data.insert(query_data.end(), img.begin(), img.end());
            ep.query_y.push_back(label);
        }
    }
    ep.support_x = Tensor::from_data({n_way * k_shot, 1, dataset.height, dataset.width},
                                     std::move(support_data));
    ep.query_x = Tensor::from_data({n_way * query_per_class, 1, dataset.height, dataset.width},
                                   std::move(query_data));
    return ep;
}

}  // namespace mnas
