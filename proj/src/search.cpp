// SPDX-License-Identifier: Apache-2.0
#include "bnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "bnas/errors.hpp"
#include "bnas/metrics.hpp"
#include "bnas/training.hpp"

namespace bnas {

std::vector<std::int32_t> gene_cardinalities(const SearchSpace& space) {
    std::vector<std::int32_t> out;
    for (const auto& d : dimensions(space)) out.push_back(static_cast<std::int32_t>(d.options.size()));
    return out;
}

Genome encode(const SearchSpace& space, const SubnetworkConfig& config) {
    check_config(space, config);
    Genome g;
    for (const auto& d : dimensions(space)) {
        std::int64_t value = 0;
        switch (d.kind) {
        case DimensionKind::Width: value = config.width_choice.at(d.id); break;
        case DimensionKind::Kernel: value = config.kernel_choice.at(d.id); break;
        case DimensionKind::Depth: value = config.skip_mask.at(d.id) ? 1 : 0; break;
        }
        const auto it = std::find(d.options.begin(), d.options.end(), value);
        g.push_back(static_cast<std::int32_t>(it - d.options.begin()));
    }
    return g;
}

SubnetworkConfig decode(const SearchSpace& space, const Genome& genome) {
    const auto dims = dimensions(space);
    if (genome.size() != dims.size())
        throw InvalidChoice("genome has " + std::to_string(genome.size()) + " genes, space has " +
                            std::to_string(dims.size()) + " dimensions");
    SubnetworkConfig c;
    for (std::size_t i = 0; i < dims.size(); ++i) {
        const auto& d = dims[i];
        if (genome[i] < 0 || static_cast<std::size_t>(genome[i]) >= d.options.size())
            throw InvalidChoice("gene " + std::to_string(i) + " out of range for dimension '" + d.id + "'");
        const auto v = d.options[static_cast<std::size_t>(genome[i])];
        switch (d.kind) {
        case DimensionKind::Width: c.width_choice[d.id] = v; break;
        case DimensionKind::Kernel: c.kernel_choice[d.id] = v; break;
        case DimensionKind::Depth: c.skip_mask[d.id] = v != 0; break;
        }
    }
    return c;
}

std::uint64_t genome_hash(const Genome& genome) noexcept {
    std::vector<unsigned char> bytes;
    bytes.reserve(genome.size() * 4);
    for (auto g : genome)
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>((std::uint32_t(g) >> (8 * i)) & 0xff));
    return fnv1a64(bytes);
}

std::string config_id(const Genome& genome) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(genome_hash(genome)));
    return buf;
}

bool dominates(const Objectives& a, const Objectives& b) noexcept {
    return a.accuracy >= b.accuracy && a.macs <= b.macs && (a.accuracy > b.accuracy || a.macs < b.macs);
}

std::vector<std::vector<std::size_t>> fast_non_dominated_sort(const std::vector<Objectives>& points) {
    const auto n = points.size();
    std::vector<std::vector<std::size_t>> dominated(n);
    std::vector<std::size_t> count(n, 0);
    std::vector<std::vector<std::size_t>> fronts;
    std::vector<std::size_t> current;
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t q = 0; q < n; ++q) {
            if (dominates(points[p], points[q]))
                dominated[p].push_back(q);
            else if (dominates(points[q], points[p]))
                ++count[p];
        }
        if (count[p] == 0) current.push_back(p);
    }
    while (!current.empty()) {
        std::vector<std::size_t> next;
        for (auto p : current)
            for (auto q : dominated[p])
                if (--count[q] == 0) next.push_back(q);
        std::sort(next.begin(), next.end());
        fronts.push_back(std::move(current));
        current = std::move(next);
    }
    return fronts;
}

std::vector<double> crowding_distance(const std::vector<Objectives>& front) {
    const auto n = front.size();
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> d(n, 0.0);
    if (n <= 2) {
        std::fill(d.begin(), d.end(), inf);
        return d;
    }
    const std::function<double(const Objectives&)> objectives[] = {
        [](const Objectives& o) { return o.accuracy; },
        [](const Objectives& o) { return double(o.macs); },
    };
    for (const auto& value : objectives) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return value(front[a]) < value(front[b]); });
        const double range = value(front[order.back()]) - value(front[order.front()]);
        d[order.front()] = inf;
        d[order.back()] = inf;
        if (range <= 0.0) continue;
        for (std::size_t k = 1; k + 1 < n; ++k)
            d[order[k]] += (value(front[order[k + 1]]) - value(front[order[k - 1]])) / range;
    }
    return d;
}

namespace {

std::vector<Objectives> objectives_of(const std::vector<Individual>& pop) {
    std::vector<Objectives> out;
    out.reserve(pop.size());
    for (const auto& i : pop) out.push_back(i.objectives);
    return out;
}

/// Sets rank and crowding of every member; returns the fronts.
std::vector<std::vector<std::size_t>> rank_population(std::vector<Individual>& pop) {
    auto fronts = fast_non_dominated_sort(objectives_of(pop));
    for (std::size_t r = 0; r < fronts.size(); ++r) {
        std::vector<Objectives> pts;
        for (auto i : fronts[r]) pts.push_back(pop[i].objectives);
        const auto cd = crowding_distance(pts);
        for (std::size_t k = 0; k < fronts[r].size(); ++k) {
            pop[fronts[r][k]].rank = static_cast<int>(r);
            pop[fronts[r][k]].crowding = cd[k];
        }
    }
    return fronts;
}

/// Higher crowding first, lower genome hash on ties.
bool less_crowded_first(const Individual& a, const Individual& b) {
    if (a.crowding != b.crowding) return a.crowding > b.crowding;
    return a.hash < b.hash;
}

} // namespace

const Individual* ParetoArchive::find(const Genome& g) const {
    auto it = all_.find(genome_hash(g));
    return it != all_.end() && it->second.genome == g ? &it->second : nullptr;
}

std::vector<ArchiveRow> ParetoArchive::rows() const {
    std::vector<Individual> pop;
    for (const auto& [h, ind] : all_) pop.push_back(ind);
    rank_population(pop);
    std::vector<ArchiveRow> out;
    for (const auto& i : pop)
        out.push_back({config_id(i.genome), i.objectives.macs, i.params, i.objectives.accuracy, i.rank, i.crowding});
    std::sort(out.begin(), out.end(), [](const ArchiveRow& a, const ArchiveRow& b) {
        if (a.rank != b.rank) return a.rank < b.rank;
        if (a.macs != b.macs) return a.macs < b.macs;
        if (a.top1_accuracy != b.top1_accuracy) return a.top1_accuracy > b.top1_accuracy;
        return a.config_id < b.config_id;
    });
    return out;
}

std::string ParetoArchive::sidecar_json(const SearchSpace& space) const {
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& [h, ind] : all_) {
        const auto c = decode(space, ind.genome);
        doc[config_id(ind.genome)] = {{"width", c.width_choice}, {"kernel", c.kernel_choice}, {"skip", c.skip_mask}};
    }
    return doc.dump(2) + "\n";
}

class Evolution {
public:
    Evolution(const SearchSpace& space, const Evaluator& evaluate, const SearchSettings& settings, std::uint64_t seed)
        : space_(space), evaluate_(evaluate), settings_(settings), rng_(seed), cards_(gene_cardinalities(space)) {
        front_size_ = settings.front_size > 0 ? settings.front_size : settings.population;
    }

    ParetoArchive& archive() { return archive_; }

    void run() {
        std::vector<Genome> initial{encode(space_, maximal_config(space_)), encode(space_, minimal_config(space_))};
        while (static_cast<int>(initial.size()) < settings_.population) initial.push_back(random_genome());
        initial.resize(static_cast<std::size_t>(settings_.population));
        auto pop = evaluate(initial);
        rank_population(pop);
        archive_.generations_ = 1;

        while (archive_.requests_ < settings_.budget &&
               (settings_.generations == 0 || archive_.generations_ < settings_.generations)) {
            std::vector<Genome> children;
            while (static_cast<int>(children.size()) < settings_.population) {
                auto a = tournament(pop).genome;
                auto b = tournament(pop).genome;
                if (rng_.uniform() < settings_.crossover_rate)
                    for (std::size_t g = 0; g < a.size(); ++g)
                        if (rng_.uniform() < 0.5) std::swap(a[g], b[g]);
                mutate(a);
                mutate(b);
                children.push_back(std::move(a));
                children.push_back(std::move(b));
            }
            auto offspring = evaluate(children);
            pop.insert(pop.end(), offspring.begin(), offspring.end());
            pop = select(std::move(pop));
            ++archive_.generations_;
        }
        refresh_front();
    }

    void refresh_front() {
        std::vector<Individual> all;
        for (const auto& [h, ind] : archive_.all_) all.push_back(ind);
        auto fronts = fast_non_dominated_sort(objectives_of(all));
        std::vector<Individual> front;
        if (!fronts.empty())
            for (auto i : fronts[0]) front.push_back(all[i]);
        auto assign = [](std::vector<Individual>& f) {
            const auto cd = crowding_distance(objectives_of(f));
            for (std::size_t k = 0; k < f.size(); ++k) f[k].rank = 0, f[k].crowding = cd[k];
        };
        assign(front);
        if (static_cast<int>(front.size()) > front_size_) {
            std::sort(front.begin(), front.end(), less_crowded_first);
            front.resize(static_cast<std::size_t>(front_size_));
            assign(front);
        }
        std::sort(front.begin(), front.end(), [](const Individual& a, const Individual& b) {
            if (a.objectives.macs != b.objectives.macs) return a.objectives.macs < b.objectives.macs;
            if (a.objectives.accuracy != b.objectives.accuracy) return a.objectives.accuracy > b.objectives.accuracy;
            return a.hash < b.hash;
        });
        archive_.front_ = std::move(front);
    }

private:
    Genome random_genome() {
        Genome g(cards_.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<std::int32_t>(rng_.below(cards_[i]));
        return g;
    }

    void mutate(Genome& g) {
        for (std::size_t i = 0; i < g.size(); ++i)
            if (rng_.uniform() < settings_.mutation_rate) g[i] = static_cast<std::int32_t>(rng_.below(cards_[i]));
    }

    const Individual& tournament(const std::vector<Individual>& pop) {
        const Individual* best = nullptr;
        for (int t = 0; t < settings_.tournament_size; ++t) {
            const auto& c = pop[rng_.below(pop.size())];
            if (!best || c.rank < best->rank || (c.rank == best->rank && less_crowded_first(c, *best))) best = &c;
        }
        return *best;
    }

    std::vector<Individual> select(std::vector<Individual> pop) {
        const auto fronts = rank_population(pop);
        std::vector<Individual> next;
        const auto target = static_cast<std::size_t>(settings_.population);
        for (const auto& f : fronts) {
            if (next.size() + f.size() <= target) {
                for (auto i : f) next.push_back(pop[i]);
                continue;
            }
            std::vector<Individual> last;
            for (auto i : f) last.push_back(pop[i]);
            std::sort(last.begin(), last.end(), less_crowded_first);
            last.resize(target - next.size());
            next.insert(next.end(), last.begin(), last.end());
            break;
        }
        return next;
    }

    /// Cached lookups; new genomes are evaluated in hash order (in parallel
    /// when jobs > 1) and merged in that same order.
    std::vector<Individual> evaluate(const std::vector<Genome>& genomes) {
        archive_.requests_ += static_cast<std::int64_t>(genomes.size());
        std::map<std::uint64_t, Genome> fresh;
        for (const auto& g : genomes) {
            const auto h = genome_hash(g);
            auto it = archive_.all_.find(h);
            if (it != archive_.all_.end()) {
                if (it->second.genome != g) throw Error("genome hash collision");
                continue;
            }
            fresh.emplace(h, g);
        }
        std::vector<std::pair<std::uint64_t, Genome>> work(fresh.begin(), fresh.end());
        std::vector<Evaluation> results(work.size());
        std::vector<std::exception_ptr> errors(work.size());
        auto run_one = [&](std::size_t k) {
            try {
                results[k] = evaluate_(decode(space_, work[k].second));
            } catch (...) {
                errors[k] = std::current_exception();
            }
        };
        const auto jobs = std::min<std::size_t>(static_cast<std::size_t>(settings_.jobs), work.size());
        if (jobs <= 1) {
            for (std::size_t k = 0; k < work.size(); ++k) run_one(k);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < jobs; ++t)
                pool.emplace_back([&, t] {
                    for (std::size_t k = t; k < work.size(); k += jobs) run_one(k);
                });
            for (auto& th : pool) th.join();
        }
        for (std::size_t k = 0; k < work.size(); ++k) {
            if (errors[k]) std::rethrow_exception(errors[k]);
            Individual ind;
            ind.genome = work[k].second;
            ind.hash = work[k].first;
            ind.objectives = {results[k].accuracy, results[k].macs};
            ind.params = results[k].params;
            archive_.all_.emplace(ind.hash, std::move(ind));
        }
        std::vector<Individual> out;
        for (const auto& g : genomes) out.push_back(archive_.all_.at(genome_hash(g)));
        return out;
    }

    const SearchSpace& space_;
    const Evaluator& evaluate_;
    SearchSettings settings_;
    Rng rng_;
    std::vector<std::int32_t> cards_;
    int front_size_ = 0;
    ParetoArchive archive_;
};

ParetoArchive evolve(const SearchSpace& space, const Evaluator& evaluate, const SearchSettings& settings,
                     std::uint64_t seed, const std::function<void(const ParetoArchive&)>& on_abort) {
    validate(settings);
    Evolution evo(space, evaluate, settings, seed);
    try {
        evo.run();
    } catch (...) {
        evo.refresh_front();
        if (on_abort) on_abort(evo.archive());
        throw;
    }
    return std::move(evo.archive());
}

Evaluator supernet_evaluator(const SuperNetwork& net, const Dataset& val) {
    return [&net, &val](const SubnetworkConfig& c) {
        const auto costs = count_macs(net, c);
        return Evaluation{evaluate(net, c, val), costs.total_macs, costs.total_params};
    };
}

namespace {

bool outperforms(double acc, std::int64_t macs, const Objectives& base, double slack, double fraction) {
    return acc >= base.accuracy - slack && macs < base.macs && double(macs) <= fraction * double(base.macs);
}

} // namespace

std::vector<Individual> outperforming_region(const ParetoArchive& archive, const Objectives& baseline,
                                             double accuracy_slack, double macs_fraction) {
    std::vector<Individual> out;
    for (const auto& i : archive.front())
        if (outperforms(i.objectives.accuracy, i.objectives.macs, baseline, accuracy_slack, macs_fraction))
            out.push_back(i);
    return out;
}

std::vector<ArchiveRow> outperforming_region(const std::vector<ArchiveRow>& rows, const Objectives& baseline,
                                             double accuracy_slack, double macs_fraction) {
    std::vector<ArchiveRow> out;
    for (const auto& r : rows)
        if (r.rank == 0 && outperforms(r.top1_accuracy, r.macs, baseline, accuracy_slack, macs_fraction))
            out.push_back(r);
    std::sort(out.begin(), out.end(), [](const ArchiveRow& a, const ArchiveRow& b) {
        if (a.macs != b.macs) return a.macs < b.macs;
        if (a.top1_accuracy != b.top1_accuracy) return a.top1_accuracy > b.top1_accuracy;
        return a.config_id < b.config_id;
    });
    return out;
}

std::string pareto_svg(const std::vector<ArchiveRow>& rows, const Objectives* baseline) {
    constexpr double W = 640, H = 440, left = 80, right = 20, top = 30, bottom = 60;
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    auto extend = [&](double x, double y) {
        xmin = std::min(xmin, x), xmax = std::max(xmax, x);
        ymin = std::min(ymin, y), ymax = std::max(ymax, y);
    };
    for (const auto& r : rows) extend(double(r.macs), r.top1_accuracy);
    if (baseline) extend(double(baseline->macs), baseline->accuracy);
    if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (xmax - xmin <= 0) xmin -= 1, xmax += 1;
    if (ymax - ymin <= 0) ymin -= 0.01, ymax += 0.01;
    const double xpad = 0.05 * (xmax - xmin), ypad = 0.05 * (ymax - ymin);
    xmin -= xpad, xmax += xpad, ymin -= ypad, ymax += ypad;
    auto sx = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (W - left - right); };
    auto sy = [&](double y) { return H - bottom - (y - ymin) / (ymax - ymin) * (H - top - bottom); };

    std::string out;
    char buf[256];
    auto emit = [&](const char* fmt, auto... args) {
        std::snprintf(buf, sizeof buf, fmt, args...);
        out += buf;
    };
    emit("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n", W, H, W,
         H);
    emit("<rect width=\"%.0f\" height=\"%.0f\" fill=\"white\"/>\n", W, H);
    emit("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", left, H - bottom, W - right,
         H - bottom);
    emit("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", left, top, left, H - bottom);
    for (int t = 0; t <= 4; ++t) {
        const double xv = xmin + (xmax - xmin) * t / 4, yv = ymin + (ymax - ymin) * t / 4;
        emit("<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"middle\">%.3g</text>\n", sx(xv),
             H - bottom + 16, xv);
        emit("<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">%.3f</text>\n", left - 6, sy(yv) + 4,
             yv);
    }
    emit("<text x=\"%.1f\" y=\"%.1f\" font-size=\"13\" text-anchor=\"middle\">MACs</text>\n", (left + W - right) / 2,
         H - 18);
    emit("<text x=\"18\" y=\"%.1f\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 %.1f)\">top-1 "
         "accuracy</text>\n",
         (top + H - bottom) / 2, (top + H - bottom) / 2);
    for (const auto& r : rows)
        if (r.rank != 0)
            emit("<circle cx=\"%.1f\" cy=\"%.1f\" r=\"2.5\" fill=\"#9aa5b1\"/>\n", sx(double(r.macs)),
                 sy(r.top1_accuracy));
    std::string points;
    for (const auto& r : rows)
        if (r.rank == 0) {
            std::snprintf(buf, sizeof buf, "%s%.1f,%.1f", points.empty() ? "" : " ", sx(double(r.macs)),
                          sy(r.top1_accuracy));
            points += buf;
        }
    if (!points.empty())
        out += "<polyline fill=\"none\" stroke=\"#d1495b\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
    for (const auto& r : rows)
        if (r.rank == 0)
            emit("<circle cx=\"%.1f\" cy=\"%.1f\" r=\"4\" fill=\"#d1495b\"/>\n", sx(double(r.macs)),
                 sy(r.top1_accuracy));
    if (baseline) {
        const double bx = sx(double(baseline->macs)), by = sy(baseline->accuracy);
        emit("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#333\" stroke-dasharray=\"5,4\"/>\n", bx,
             top, bx, H - bottom);
        emit("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#333\" stroke-dasharray=\"5,4\"/>\n", left,
             by, W - right, by);
        emit("<rect x=\"%.1f\" y=\"%.1f\" width=\"9\" height=\"9\" fill=\"#333\"/>\n", bx - 4.5, by - 4.5);
    }
    out += "</svg>\n";
    return out;
}

} // namespace bnas
