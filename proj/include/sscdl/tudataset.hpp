#pragma once

#include "sscdl/graph.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

// Loader for the common benchmark text layout: a dataset NAME lives in
// <root>/NAME/ as NAME_A.txt (directed edge pairs, 1-based global node ids),
// NAME_graph_indicator.txt, NAME_graph_labels.txt and optionally
// NAME_node_labels.txt or NAME_node_attributes.txt. Edges are deduplicated
// to undirected pairs and self loops are dropped. Class labels are remapped
// to contiguous ids in sorted order of the raw values.
namespace sscdl {

enum class FeatureMode { node_labels_onehot, node_attributes, degree_onehot };

inline std::string to_string(FeatureMode m) {
    switch (m) {
        case FeatureMode::node_labels_onehot: return "node_labels_onehot";
        case FeatureMode::node_attributes: return "node_attributes";
        case FeatureMode::degree_onehot: return "degree_onehot";
    }
    throw ConfigError("unknown feature mode");
}

inline FeatureMode feature_mode_from_string(const std::string& s) {
    if (s == "node_labels_onehot") return FeatureMode::node_labels_onehot;
    if (s == "node_attributes") return FeatureMode::node_attributes;
    if (s == "degree_onehot") return FeatureMode::degree_onehot;
    throw ConfigError("unknown feature mode: " + s);
}

struct DatasetManifest {
    std::string name;
    int n_graphs = 0;
    int n_classes = 0;
    FeatureMode feature_mode = FeatureMode::degree_onehot;
    int feature_dim = 0;
    int max_degree = 400;
    std::vector<int> class_label_values;  // raw value of class id c at index c
    std::vector<int> node_label_values;   // raw value of one-hot column j at index j
    std::uint64_t content_fingerprint = 0;
};

struct LoadOptions {
    std::optional<FeatureMode> feature_mode;  // default: labels, else attributes, else degree
    int max_degree = 400;
};

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return lines;
}

inline long parse_long(const std::string& s, const std::string& where, std::size_t lineno) {
    std::size_t pos = 0;
    long v = 0;
    try {
        v = std::stol(s, &pos);
    } catch (const std::exception&) {
        throw DataError(where + ": malformed integer at line " + std::to_string(lineno + 1));
    }
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    if (pos != s.size())
        throw DataError(where + ": trailing junk at line " + std::to_string(lineno + 1));
    return v;
}

inline std::vector<double> parse_reals(const std::string& s, const std::string& where,
                                       std::size_t lineno) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw DataError(where + ": malformed real at line " + std::to_string(lineno + 1));
        }
    }
    if (out.empty()) throw DataError(where + ": empty line " + std::to_string(lineno + 1));
    return out;
}

}  // namespace detail

inline std::pair<DatasetManifest, std::vector<Graph>> load_tudataset(
    const std::filesystem::path& root, const std::string& name, const LoadOptions& opt = {}) {
    namespace fs = std::filesystem;
    const fs::path dir = root / name;
    auto file = [&](const std::string& suffix) { return dir / (name + "_" + suffix); };

    if (!fs::exists(file("A.txt")))
        throw DataError("missing edge file " + file("A.txt").string());
    if (!fs::exists(file("graph_indicator.txt")))
        throw DataError("missing graph indicator file " + file("graph_indicator.txt").string());
    if (!fs::exists(file("graph_labels.txt")))
        throw DataError("missing graph label file " + file("graph_labels.txt").string());

    const auto indicator_lines = detail::read_lines(file("graph_indicator.txt"));
    const int n_nodes = static_cast<int>(indicator_lines.size());
    if (n_nodes == 0) throw DataError("graph indicator file is empty");
    std::vector<int> node_graph(static_cast<std::size_t>(n_nodes));
    int n_graphs = 0;
    for (std::size_t i = 0; i < indicator_lines.size(); ++i) {
        long g = detail::parse_long(indicator_lines[i], "graph_indicator", i);
        if (g < 1) throw DataError("graph_indicator: ids are 1-based");
        node_graph[i] = static_cast<int>(g - 1);
        n_graphs = std::max(n_graphs, static_cast<int>(g));
    }

    // Local node index within its graph, in file order.
    std::vector<int> local_index(static_cast<std::size_t>(n_nodes));
    std::vector<int> graph_size(static_cast<std::size_t>(n_graphs), 0);
    for (int i = 0; i < n_nodes; ++i)
        local_index[static_cast<std::size_t>(i)] = graph_size[static_cast<std::size_t>(node_graph[static_cast<std::size_t>(i)])]++;

    const auto edge_lines = detail::read_lines(file("A.txt"));
    std::vector<std::vector<std::pair<int, int>>> edges(static_cast<std::size_t>(n_graphs));
    for (std::size_t i = 0; i < edge_lines.size(); ++i) {
        auto comma = edge_lines[i].find(',');
        if (comma == std::string::npos)
            throw DataError("A.txt: missing comma at line " + std::to_string(i + 1));
        long a = detail::parse_long(edge_lines[i].substr(0, comma), "A.txt", i);
        long b = detail::parse_long(edge_lines[i].substr(comma + 1), "A.txt", i);
        if (a < 1 || b < 1 || a > n_nodes || b > n_nodes)
            throw DataError("A.txt: node id out of range at line " + std::to_string(i + 1));
        int ga = node_graph[static_cast<std::size_t>(a - 1)];
        int gb = node_graph[static_cast<std::size_t>(b - 1)];
        if (ga != gb)
            throw DataError("A.txt: edge joins two graphs at line " + std::to_string(i + 1));
        if (a == b) continue;  // self loops are dropped
        edges[static_cast<std::size_t>(ga)].emplace_back(local_index[static_cast<std::size_t>(a - 1)],
                                                         local_index[static_cast<std::size_t>(b - 1)]);
    }

    const auto label_lines = detail::read_lines(file("graph_labels.txt"));
    if (static_cast<int>(label_lines.size()) != n_graphs)
        throw DataError("graph_labels: expected " + std::to_string(n_graphs) + " lines, got " +
                        std::to_string(label_lines.size()));
    std::vector<int> raw_labels(static_cast<std::size_t>(n_graphs));
    std::map<int, int> class_map;
    for (std::size_t i = 0; i < label_lines.size(); ++i) {
        raw_labels[i] = static_cast<int>(detail::parse_long(label_lines[i], "graph_labels", i));
        class_map[raw_labels[i]] = 0;
    }
    DatasetManifest man;
    man.name = name;
    man.n_graphs = n_graphs;
    man.max_degree = opt.max_degree;
    for (auto& [raw, id] : class_map) {
        id = static_cast<int>(man.class_label_values.size());
        man.class_label_values.push_back(raw);
    }
    man.n_classes = static_cast<int>(man.class_label_values.size());
    if (man.n_classes < 2) throw DataError("dataset has fewer than two classes");

    const bool has_node_labels = fs::exists(file("node_labels.txt"));
    const bool has_node_attrs = fs::exists(file("node_attributes.txt"));
    FeatureMode mode;
    if (opt.feature_mode) {
        mode = *opt.feature_mode;
        if (mode == FeatureMode::node_labels_onehot && !has_node_labels)
            throw DataError("requested node label features but " + file("node_labels.txt").string() +
                            " is missing");
        if (mode == FeatureMode::node_attributes && !has_node_attrs)
            throw DataError("requested node attribute features but " +
                            file("node_attributes.txt").string() + " is missing");
    } else {
        mode = has_node_labels ? FeatureMode::node_labels_onehot
               : has_node_attrs ? FeatureMode::node_attributes
                                : FeatureMode::degree_onehot;
    }
    man.feature_mode = mode;

    // Per-node feature rows, assembled after a first pass that fixes the dimension.
    std::vector<std::vector<double>> feat_rows(static_cast<std::size_t>(n_nodes));
    if (mode == FeatureMode::node_labels_onehot) {
        const auto lines = detail::read_lines(file("node_labels.txt"));
        if (static_cast<int>(lines.size()) != n_nodes)
            throw DataError("node_labels: expected one line per node");
        std::vector<int> raw(static_cast<std::size_t>(n_nodes));
        std::map<int, int> value_map;
        for (std::size_t i = 0; i < lines.size(); ++i) {
            raw[i] = static_cast<int>(detail::parse_long(lines[i], "node_labels", i));
            value_map[raw[i]] = 0;
        }
        for (auto& [v, id] : value_map) {
            id = static_cast<int>(man.node_label_values.size());
            man.node_label_values.push_back(v);
        }
        man.feature_dim = static_cast<int>(man.node_label_values.size());
        for (int i = 0; i < n_nodes; ++i) {
            std::vector<double> row(static_cast<std::size_t>(man.feature_dim), 0.0);
            row[static_cast<std::size_t>(value_map[raw[static_cast<std::size_t>(i)]])] = 1.0;
            feat_rows[static_cast<std::size_t>(i)] = std::move(row);
        }
    } else if (mode == FeatureMode::node_attributes) {
        const auto lines = detail::read_lines(file("node_attributes.txt"));
        if (static_cast<int>(lines.size()) != n_nodes)
            throw DataError("node_attributes: expected one line per node");
        for (std::size_t i = 0; i < lines.size(); ++i)
            feat_rows[i] = detail::parse_reals(lines[i], "node_attributes", i);
        man.feature_dim = static_cast<int>(feat_rows[0].size());
        for (std::size_t i = 0; i < feat_rows.size(); ++i)
            if (static_cast<int>(feat_rows[i].size()) != man.feature_dim)
                throw DataError("node_attributes: ragged row at line " + std::to_string(i + 1));
    } else {
        // degree of the deduplicated undirected graph
        std::vector<int> degree(static_cast<std::size_t>(n_nodes), 0);
        std::vector<std::vector<int>> global_of(static_cast<std::size_t>(n_graphs));
        for (int i = 0; i < n_nodes; ++i)
            global_of[static_cast<std::size_t>(node_graph[static_cast<std::size_t>(i)])].push_back(i);
        for (int g = 0; g < n_graphs; ++g) {
            std::set<std::pair<int, int>> uniq;
            for (auto [a, b] : edges[static_cast<std::size_t>(g)])
                uniq.emplace(std::min(a, b), std::max(a, b));
            for (auto [a, b] : uniq) {
                degree[static_cast<std::size_t>(global_of[static_cast<std::size_t>(g)][static_cast<std::size_t>(a)])]++;
                degree[static_cast<std::size_t>(global_of[static_cast<std::size_t>(g)][static_cast<std::size_t>(b)])]++;
            }
        }
        int max_seen = 0;
        for (int d : degree) max_seen = std::max(max_seen, d);
        man.feature_dim = std::min(max_seen, opt.max_degree) + 1;
        for (int i = 0; i < n_nodes; ++i) {
            std::vector<double> row(static_cast<std::size_t>(man.feature_dim), 0.0);
            row[static_cast<std::size_t>(std::min(degree[static_cast<std::size_t>(i)], opt.max_degree))] = 1.0;
            feat_rows[static_cast<std::size_t>(i)] = std::move(row);
        }
    }

    std::vector<Graph> graphs;
    graphs.reserve(static_cast<std::size_t>(n_graphs));
    {
        std::vector<int> cursor(static_cast<std::size_t>(n_graphs), 0);
        std::vector<Matrix> feats(static_cast<std::size_t>(n_graphs));
        for (int g = 0; g < n_graphs; ++g)
            feats[static_cast<std::size_t>(g)] = Matrix::Zero(graph_size[static_cast<std::size_t>(g)], man.feature_dim);
        for (int i = 0; i < n_nodes; ++i) {
            int g = node_graph[static_cast<std::size_t>(i)];
            for (int j = 0; j < man.feature_dim; ++j)
                feats[static_cast<std::size_t>(g)](local_index[static_cast<std::size_t>(i)], j) =
                    feat_rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
        for (int g = 0; g < n_graphs; ++g) {
            if (graph_size[static_cast<std::size_t>(g)] == 0)
                throw DataError("graph " + std::to_string(g + 1) + " has no nodes");
            int cls = 0;
            for (std::size_t c = 0; c < man.class_label_values.size(); ++c)
                if (man.class_label_values[c] == raw_labels[static_cast<std::size_t>(g)])
                    cls = static_cast<int>(c);
            graphs.push_back(make_graph(std::move(feats[static_cast<std::size_t>(g)]),
                                        edges[static_cast<std::size_t>(g)], cls, g));
        }
    }

    // Content fingerprint over the canonical in-memory form.
    std::uint64_t h = 14695981039346656037ull;
    h = fnv1a64(name, h);
    h = fnv1a64_mix(h, static_cast<std::uint64_t>(n_graphs));
    h = fnv1a64_mix(h, static_cast<std::uint64_t>(man.n_classes));
    h = fnv1a64(to_string(mode), h);
    for (const Graph& g : graphs) {
        h = fnv1a64_mix(h, static_cast<std::uint64_t>(g.num_nodes()));
        h = fnv1a64_mix(h, static_cast<std::uint64_t>(*g.label));
        for (auto [a, b] : g.edges) {
            h = fnv1a64_mix(h, static_cast<std::uint64_t>(a));
            h = fnv1a64_mix(h, static_cast<std::uint64_t>(b));
        }
        h = fnv1a64(reinterpret_cast<const char*>(g.node_features.data()),
                    static_cast<std::size_t>(g.node_features.size()) * sizeof(double), h);
    }
    man.content_fingerprint = h;
    return {man, graphs};
}

// Writes the canonical serialization of a loaded dataset: every undirected
// edge appears as both directed lines, graphs in id order, "a, b" spacing.
inline void save_tudataset(const std::filesystem::path& root, const DatasetManifest& man,
                           const std::vector<Graph>& graphs) {
    namespace fs = std::filesystem;
    const fs::path dir = root / man.name;
    fs::create_directories(dir);
    auto file = [&](const std::string& suffix) { return dir / (man.name + "_" + suffix); };

    std::vector<int> offset(graphs.size() + 1, 0);
    for (std::size_t k = 0; k < graphs.size(); ++k)
        offset[k + 1] = offset[k] + graphs[k].num_nodes();

    {
        std::ofstream a(file("A.txt"));
        for (std::size_t k = 0; k < graphs.size(); ++k)
            for (auto [u, v] : graphs[k].edges) {
                a << (offset[k] + u + 1) << ", " << (offset[k] + v + 1) << "\n";
                a << (offset[k] + v + 1) << ", " << (offset[k] + u + 1) << "\n";
            }
    }
    {
        std::ofstream gi(file("graph_indicator.txt"));
        for (std::size_t k = 0; k < graphs.size(); ++k)
            for (int i = 0; i < graphs[k].num_nodes(); ++i) gi << (k + 1) << "\n";
    }
    {
        std::ofstream gl(file("graph_labels.txt"));
        for (const Graph& g : graphs)
            gl << man.class_label_values[static_cast<std::size_t>(*g.label)] << "\n";
    }
    if (man.feature_mode == FeatureMode::node_labels_onehot) {
        std::ofstream nl(file("node_labels.txt"));
        for (const Graph& g : graphs)
            for (int i = 0; i < g.num_nodes(); ++i) {
                int arg = 0;
                for (int j = 1; j < g.feature_dim(); ++j)
                    if (g.node_features(i, j) > g.node_features(i, arg)) arg = j;
                nl << man.node_label_values[static_cast<std::size_t>(arg)] << "\n";
            }
    } else if (man.feature_mode == FeatureMode::node_attributes) {
        std::ofstream na(file("node_attributes.txt"));
        na.setf(std::ios::fixed);
        na.precision(6);
        for (const Graph& g : graphs)
            for (int i = 0; i < g.num_nodes(); ++i) {
                for (int j = 0; j < g.feature_dim(); ++j)
                    na << (j ? ", " : "") << g.node_features(i, j);
                na << "\n";
            }
    }
}

// Stratified fold assignment plus a per-class labeled subsample of the
// training partition. The same seed yields the same plan regardless of
// which method variant consumes it.
struct SplitPlan {
    int fold_count = 10;
    int test_fold = 0;
    int val_fold = 1;
    double label_ratio = 1.0;
    std::uint64_t seed = 0;
    std::vector<int> fold_of;       // per graph
    std::vector<char> is_labeled;   // per graph; set only on train-partition graphs

    std::vector<int> test_indices() const { return select([&](int g) { return fold_of[static_cast<std::size_t>(g)] == test_fold; }); }
    std::vector<int> val_indices() const { return select([&](int g) { return fold_of[static_cast<std::size_t>(g)] == val_fold; }); }
    std::vector<int> train_indices() const {
        return select([&](int g) {
            int f = fold_of[static_cast<std::size_t>(g)];
            return f != test_fold && f != val_fold;
        });
    }
    std::vector<int> labeled_indices() const { return select([&](int g) { return is_labeled[static_cast<std::size_t>(g)] != 0; }); }
    std::vector<int> unlabeled_train_indices() const {
        return select([&](int g) {
            int f = fold_of[static_cast<std::size_t>(g)];
            return f != test_fold && f != val_fold && !is_labeled[static_cast<std::size_t>(g)];
        });
    }

private:
    template <typename Pred>
    std::vector<int> select(Pred pred) const {
        std::vector<int> out;
        for (int g = 0; g < static_cast<int>(fold_of.size()); ++g)
            if (pred(g)) out.push_back(g);
        return out;
    }
};

inline SplitPlan make_split_plan(const DatasetManifest& man, const std::vector<Graph>& graphs,
                                 int fold_id, int fold_count, double label_ratio,
                                 std::uint64_t seed) {
    if (fold_count < 2) throw ConfigError("make_split_plan: fold_count must be at least 2");
    if (fold_id < 0 || fold_id >= fold_count)
        throw ConfigError("make_split_plan: fold_id out of range");
    if (label_ratio <= 0.0 || label_ratio > 1.0)
        throw ConfigError("make_split_plan: label_ratio must lie in (0, 1]");
    if (static_cast<int>(graphs.size()) != man.n_graphs)
        throw ConfigError("make_split_plan: graph count does not match manifest");
    if (static_cast<int>(graphs.size()) < fold_count)
        throw ConfigError("make_split_plan: fewer graphs than folds");

    SplitPlan plan;
    plan.fold_count = fold_count;
    plan.test_fold = fold_id;
    plan.val_fold = (fold_id + 1) % fold_count;
    plan.label_ratio = label_ratio;
    plan.seed = seed;
    plan.fold_of.assign(graphs.size(), 0);
    plan.is_labeled.assign(graphs.size(), 0);

    // Per-class shuffle, then deal round robin with a cursor that carries
    // across classes so fold sizes stay balanced overall.
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(man.n_classes));
    for (std::size_t g = 0; g < graphs.size(); ++g) {
        if (!graphs[g].label) throw DataError("make_split_plan: graph without a label");
        by_class[static_cast<std::size_t>(*graphs[g].label)].push_back(static_cast<int>(g));
    }
    Rng fold_rng(derive_seed(seed, "folds"));
    int cursor = 0;
    for (auto& members : by_class) {
        fold_rng.shuffle(members);
        for (int g : members) {
            plan.fold_of[static_cast<std::size_t>(g)] = cursor % fold_count;
            ++cursor;
        }
    }

    // Largest-remainder apportionment of round(ratio * n_train) over classes.
    std::vector<std::vector<int>> train_by_class(static_cast<std::size_t>(man.n_classes));
    int n_train = 0;
    for (std::size_t g = 0; g < graphs.size(); ++g) {
        int f = plan.fold_of[g];
        if (f != plan.test_fold && f != plan.val_fold) {
            train_by_class[static_cast<std::size_t>(*graphs[g].label)].push_back(static_cast<int>(g));
            ++n_train;
        }
    }
    int total = static_cast<int>(std::lround(label_ratio * n_train));
    std::vector<int> quota(static_cast<std::size_t>(man.n_classes), 0);
    std::vector<std::pair<double, int>> remainders;
    int assigned = 0;
    for (int c = 0; c < man.n_classes; ++c) {
        double exact = label_ratio * static_cast<double>(train_by_class[static_cast<std::size_t>(c)].size());
        quota[static_cast<std::size_t>(c)] = static_cast<int>(std::floor(exact));
        assigned += quota[static_cast<std::size_t>(c)];
        remainders.emplace_back(-(exact - std::floor(exact)), c);
    }
    std::sort(remainders.begin(), remainders.end());
    for (int i = 0; assigned < total && i < man.n_classes; ++i) {
        int c = remainders[static_cast<std::size_t>(i)].second;
        if (quota[static_cast<std::size_t>(c)] <
            static_cast<int>(train_by_class[static_cast<std::size_t>(c)].size())) {
            ++quota[static_cast<std::size_t>(c)];
            ++assigned;
        }
    }
    Rng label_rng(derive_seed(seed, "labeled", static_cast<std::uint64_t>(fold_id)));
    for (int c = 0; c < man.n_classes; ++c) {
        auto& members = train_by_class[static_cast<std::size_t>(c)];
        label_rng.shuffle(members);
        for (int i = 0; i < quota[static_cast<std::size_t>(c)]; ++i)
            plan.is_labeled[static_cast<std::size_t>(members[static_cast<std::size_t>(i)])] = 1;
    }
    return plan;
}

inline nlohmann::json to_json(const SplitPlan& p) {
    return nlohmann::json{{"fold_count", p.fold_count},
                          {"test_fold", p.test_fold},
                          {"val_fold", p.val_fold},
                          {"label_ratio", p.label_ratio},
                          {"seed", p.seed},
                          {"fold_of", p.fold_of},
                          {"is_labeled", std::vector<int>(p.is_labeled.begin(), p.is_labeled.end())}};
}

inline SplitPlan split_plan_from_json(const nlohmann::json& j) {
    SplitPlan p;
    p.fold_count = j.at("fold_count").get<int>();
    p.test_fold = j.at("test_fold").get<int>();
    p.val_fold = j.at("val_fold").get<int>();
    p.label_ratio = j.at("label_ratio").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.fold_of = j.at("fold_of").get<std::vector<int>>();
    auto lab = j.at("is_labeled").get<std::vector<int>>();
    p.is_labeled.assign(lab.begin(), lab.end());
    return p;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
    return nlohmann::json{{"name", m.name},
                          {"n_graphs", m.n_graphs},
                          {"n_classes", m.n_classes},
                          {"feature_mode", to_string(m.feature_mode)},
                          {"feature_dim", m.feature_dim},
                          {"max_degree", m.max_degree},
                          {"class_label_values", m.class_label_values},
                          {"node_label_values", m.node_label_values},
                          {"content_fingerprint", hex64(m.content_fingerprint)}};
}

}  // namespace sscdl
