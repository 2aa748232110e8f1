#include "tokenseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tokenseg {

namespace fs = std::filesystem;

void SplitSpec::validate() const {
    if (n_labeled < 1) throw std::invalid_argument("data.n_labeled must be positive");
    if (n_unlabeled < 1) throw std::invalid_argument("data.n_unlabeled must be positive");
    if (n_val < 1) throw std::invalid_argument("data.n_val must be positive");
}

namespace {

void check_scene_frame(const Scene& scene, const char* who) {
    if (scene.size <= 0 || !scene.image.defined() || scene.image.rank() != 3 ||
        scene.image.dim(0) != scene.size || scene.image.dim(1) != scene.size ||
        scene.image.dim(2) != 3) {
        throw std::invalid_argument(std::string(who) + " needs an initialized scene frame");
    }
}

void put_pixel(Scene& scene, int x, int y, int cls, const real color[3]) {
    const size_t px = static_cast<size_t>(y) * scene.size + x;
    real* pv = scene.image.data() + px * 3;
    pv[0] = color[0];
    pv[1] = color[1];
    pv[2] = color[2];
    scene.label[px] = cls;
}

real tri_edge(real px, real py, real ax, real ay, real bx, real by) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

}  // namespace

void paint_background(Scene& scene, real base_gray, real noise_amp, Rng& rng) {
    check_scene_frame(scene, "paint_background");
    scene.label.assign(static_cast<size_t>(scene.size) * scene.size, 0);
    for (real& v : scene.image.values()) {
        v = std::clamp(base_gray + rng.uniform(-noise_amp, noise_amp), real(0), real(1));
    }
}

void paint_rect(Scene& scene, int x0, int y0, int x1, int y1, int cls, const real color[3]) {
    check_scene_frame(scene, "paint_rect");
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, scene.size);
    y1 = std::min(y1, scene.size);
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) put_pixel(scene, x, y, cls, color);
    }
}

void paint_circle(Scene& scene, real cx, real cy, real radius, int cls, const real color[3]) {
    check_scene_frame(scene, "paint_circle");
    const real r2 = radius * radius;
    for (int y = 0; y < scene.size; ++y) {
        for (int x = 0; x < scene.size; ++x) {
            const real dx = (x + real(0.5)) - cx;
            const real dy = (y + real(0.5)) - cy;
            if (dx * dx + dy * dy <= r2) put_pixel(scene, x, y, cls, color);
        }
    }
}

void paint_triangle(Scene& scene, real x0, real y0, real x1, real y1, real x2, real y2, int cls,
                    const real color[3]) {
    check_scene_frame(scene, "paint_triangle");
    for (int y = 0; y < scene.size; ++y) {
        for (int x = 0; x < scene.size; ++x) {
            const real px = x + real(0.5), py = y + real(0.5);
            const real e0 = tri_edge(px, py, x0, y0, x1, y1);
            const real e1 = tri_edge(px, py, x1, y1, x2, y2);
            const real e2 = tri_edge(px, py, x2, y2, x0, y0);
            const bool all_nonneg = e0 >= 0 && e1 >= 0 && e2 >= 0;
            const bool all_nonpos = e0 <= 0 && e1 <= 0 && e2 <= 0;
            if (all_nonneg || all_nonpos) put_pixel(scene, x, y, cls, color);
        }
    }
}

void class_color(int cls, real out[3]) {
    static constexpr real kPalette[][3] = {
        {real(0.45), real(0.45), real(0.45)},  // background gray
        {real(0.85), real(0.20), real(0.20)},  // red
        {real(0.20), real(0.80), real(0.25)},  // green
        {real(0.25), real(0.35), real(0.85)},  // blue
        {real(0.85), real(0.80), real(0.20)},  // yellow
        {real(0.80), real(0.25), real(0.80)},  // magenta
        {real(0.20), real(0.80), real(0.80)},  // cyan
        {real(0.90), real(0.55), real(0.15)},  // orange
    };
    constexpr int kPaletteSize = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));
    if (cls < 0) throw std::invalid_argument("class_color needs a non-negative class");
    const real* c = kPalette[cls % kPaletteSize];
    out[0] = c[0];
    out[1] = c[1];
    out[2] = c[2];
}

Scene gen_scene_with_shapes(Rng& rng, int size, int num_classes, int n_shapes) {
    if (size < 16) throw std::invalid_argument("scene size must be at least 16");
    if (num_classes < 2) throw std::invalid_argument("scenes need at least 2 classes");
    if (n_shapes < 0) throw std::invalid_argument("n_shapes must be non-negative");
    Scene scene;
    scene.size = size;
    scene.num_classes = num_classes;
    scene.image = Tensor::zeros({size, size, 3});
    scene.label.assign(static_cast<size_t>(size) * size, 0);
    paint_background(scene, real(0.45), real(0.05), rng);
    const real s = static_cast<real>(size);
    for (int i = 0; i < n_shapes; ++i) {
        const int cls = num_classes == 2 ? 1 : rng.uniform_int(1, num_classes - 1);
        real color[3];
        class_color(cls, color);
        for (real& c : color) c = std::clamp(c + rng.uniform(real(-0.3), real(0.3)), real(0),
                                             real(1));
        const int kind = rng.uniform_int(0, 2);
        if (kind == 0) {
            const real radius = rng.uniform(s * real(0.12), s * real(0.3));
            const real cx = rng.uniform(s * real(0.25), s * real(0.75));
            const real cy = rng.uniform(s * real(0.25), s * real(0.75));
            paint_circle(scene, cx, cy, radius, cls, color);
        } else if (kind == 1) {
            const int w = rng.uniform_int(size / 5, size / 2);
            const int h = rng.uniform_int(size / 5, size / 2);
            const int x0 = rng.uniform_int(0, size - w);
            const int y0 = rng.uniform_int(0, size - h);
            paint_rect(scene, x0, y0, x0 + w, y0 + h, cls, color);
        } else {
            const real lo = s * real(0.05), hi = s * real(0.95);
            const real x0 = rng.uniform(lo, hi), y0 = rng.uniform(lo, hi);
            const real x1 = rng.uniform(lo, hi), y1 = rng.uniform(lo, hi);
            const real x2 = rng.uniform(lo, hi), y2 = rng.uniform(lo, hi);
            paint_triangle(scene, x0, y0, x1, y1, x2, y2, cls, color);
        }
    }
    return scene;
}

Scene gen_scene(Rng& rng, int size, int num_classes) {
    const int n_shapes = rng.uniform_int(1, 3);
    return gen_scene_with_shapes(rng, size, num_classes, n_shapes);
}

Splits make_splits(const SplitSpec& spec, int image_size, int num_classes) {
    spec.validate();
    Splits splits;
    int id = 0;
    auto next_scene = [&] {
        Rng rng = Rng::stream(spec.seed, "scene" + std::to_string(id));
        ++id;
        return gen_scene(rng, image_size, num_classes);
    };
    splits.labeled.reserve(static_cast<size_t>(spec.n_labeled));
    for (int i = 0; i < spec.n_labeled; ++i) splits.labeled.push_back(next_scene());
    splits.unlabeled.reserve(static_cast<size_t>(spec.n_unlabeled));
    for (int i = 0; i < spec.n_unlabeled; ++i) {
        Scene s = next_scene();
        s.label.clear();  // the unlabeled split never carries labels
        splits.unlabeled.push_back(std::move(s));
    }
    splits.val.reserve(static_cast<size_t>(spec.n_val));
    for (int i = 0; i < spec.n_val; ++i) splits.val.push_back(next_scene());
    return splits;
}

// ---- metrics ----

void accumulate_confusion(std::vector<long>& conf, const std::vector<int>& pred,
                          const std::vector<int>& truth, int num_classes) {
    if (num_classes < 1) throw std::invalid_argument("confusion_matrix needs num_classes >= 1");
    if (conf.size() != static_cast<size_t>(num_classes) * num_classes) {
        throw std::invalid_argument("confusion matrix buffer has wrong size");
    }
    if (pred.size() != truth.size()) {
        throw std::invalid_argument("confusion_matrix pred/truth lengths differ: " +
                                    std::to_string(pred.size()) + " vs " +
                                    std::to_string(truth.size()));
    }
    for (size_t i = 0; i < pred.size(); ++i) {
        const int t = truth[i], p = pred[i];
        if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
            throw std::out_of_range("confusion_matrix class outside [0," +
                                    std::to_string(num_classes) + "): truth " + std::to_string(t) +
                                    ", pred " + std::to_string(p));
        }
        ++conf[static_cast<size_t>(t) * num_classes + p];
    }
}

std::vector<long> confusion_matrix(const std::vector<int>& pred, const std::vector<int>& truth,
                                   int num_classes) {
    std::vector<long> conf(static_cast<size_t>(num_classes) * num_classes, 0);
    accumulate_confusion(conf, pred, truth, num_classes);
    return conf;
}

IouReport miou_from_confusion(const std::vector<long>& conf, int num_classes) {
    if (conf.size() != static_cast<size_t>(num_classes) * num_classes) {
        throw std::invalid_argument("confusion matrix has wrong size for " +
                                    std::to_string(num_classes) + " classes");
    }
    IouReport report;
    report.per_class.assign(static_cast<size_t>(num_classes), real(-1));
    real total = 0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        long inter = conf[static_cast<size_t>(c) * num_classes + c];
        long row = 0, col = 0;
        for (int j = 0; j < num_classes; ++j) {
            row += conf[static_cast<size_t>(c) * num_classes + j];
            col += conf[static_cast<size_t>(j) * num_classes + c];
        }
        const long uni = row + col - inter;
        if (uni <= 0) continue;  // class absent from truth and prediction
        const real iou = static_cast<real>(inter) / static_cast<real>(uni);
        report.per_class[static_cast<size_t>(c)] = iou;
        total += iou;
        ++counted;
    }
    if (counted == 0) {
        throw std::runtime_error("mIoU undefined: every class has an empty union");
    }
    report.miou = total / static_cast<real>(counted);
    return report;
}

real miou(const std::vector<long>& conf, int num_classes) {
    return miou_from_confusion(conf, num_classes).miou;
}

IouReport evaluate(const std::function<std::vector<int>(const Scene&)>& predict,
                   const std::vector<Scene>& val_set, int num_classes) {
    if (val_set.empty()) throw std::invalid_argument("evaluate needs a non-empty val set");
    std::vector<long> conf(static_cast<size_t>(num_classes) * num_classes, 0);
    for (const Scene& scene : val_set) {
        if (scene.label.empty()) {
            throw std::invalid_argument("evaluate needs labeled scenes");
        }
        accumulate_confusion(conf, predict(scene), scene.label, num_classes);
    }
    return miou_from_confusion(conf, num_classes);
}

// ---- scene archive ----

namespace {

void write_scene_file(const fs::path& path, const Scene& scene) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write scene file: " + path.string());
    const int32_t header[4] = {static_cast<int32_t>(scene.size), static_cast<int32_t>(scene.size),
                               static_cast<int32_t>(scene.num_classes),
                               scene.label.empty() ? 0 : 1};
    os.write(reinterpret_cast<const char*>(header), sizeof(header));
    std::vector<double> img(scene.image.size());
    for (size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(scene.image.data()[i]);
    os.write(reinterpret_cast<const char*>(img.data()),
             static_cast<std::streamsize>(img.size() * sizeof(double)));
    if (!scene.label.empty()) {
        std::vector<int32_t> lab(scene.label.begin(), scene.label.end());
        os.write(reinterpret_cast<const char*>(lab.data()),
                 static_cast<std::streamsize>(lab.size() * sizeof(int32_t)));
    }
    if (!os) throw std::runtime_error("write failure on scene file: " + path.string());
}

Scene read_scene_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read scene file: " + path.string());
    int32_t header[4];
    is.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!is || header[0] != header[1] || header[0] <= 0) {
        throw std::runtime_error("malformed scene header in " + path.string());
    }
    Scene scene;
    scene.size = header[0];
    scene.num_classes = header[2];
    scene.image = Tensor::zeros({scene.size, scene.size, 3});
    std::vector<double> img(scene.image.size());
    is.read(reinterpret_cast<char*>(img.data()),
            static_cast<std::streamsize>(img.size() * sizeof(double)));
    for (size_t i = 0; i < img.size(); ++i) scene.image.data()[i] = static_cast<real>(img[i]);
    if (header[3] != 0) {
        std::vector<int32_t> lab(static_cast<size_t>(scene.size) * scene.size);
        is.read(reinterpret_cast<char*>(lab.data()),
                static_cast<std::streamsize>(lab.size() * sizeof(int32_t)));
        scene.label.assign(lab.begin(), lab.end());
    }
    if (!is) throw std::runtime_error("truncated scene file: " + path.string());
    return scene;
}

}  // namespace

void write_scene_archive(const std::string& dir, const Splits& splits, const SplitSpec& spec) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write manifest in " + dir);
    manifest << "seed=" << spec.seed << '\n';
    int id = 0;
    auto dump = [&](const std::vector<Scene>& list, const char* split) {
        for (const Scene& scene : list) {
            char name[32];
            std::snprintf(name, sizeof(name), "scene_%05d.bin", id);
            ++id;
            write_scene_file(fs::path(dir) / name, scene);
            manifest << name << ' ' << split << '\n';
        }
    };
    dump(splits.labeled, "labeled");
    dump(splits.unlabeled, "unlabeled");
    dump(splits.val, "val");
}

Splits read_scene_archive(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot read manifest in " + dir);
    std::string line;
    if (!std::getline(manifest, line) || line.rfind("seed=", 0) != 0) {
        throw std::runtime_error("manifest must start with a seed= line");
    }
    Splits splits;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, split;
        if (!(ls >> name >> split)) {
            throw std::runtime_error("malformed manifest line: '" + line + "'");
        }
        Scene scene = read_scene_file(fs::path(dir) / name);
        if (split == "labeled") splits.labeled.push_back(std::move(scene));
        else if (split == "unlabeled") splits.unlabeled.push_back(std::move(scene));
        else if (split == "val") splits.val.push_back(std::move(scene));
        else throw std::runtime_error("unknown split in manifest: " + split);
    }
    return splits;
}

}  // namespace tokenseg
