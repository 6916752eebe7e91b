// vlink command-line interface.
//
// Exit codes: 0 success, 1 usage error, 2 data error (unreadable or invalid
// input, or a failed check in gradcheck/verify).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vlink/vlink.hpp"

namespace fs = std::filesystem;
using namespace vlink;

namespace {

struct Globals {
  std::size_t workers = 1;
  bool json = false;
};

/// Rethrows data errors with the offending path in front.
template <class F>
auto with_path(const fs::path& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ParseError& e) {
    throw DataError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    const std::string what = e.what();
    if (what.find(path.string()) != std::string::npos) throw;
    throw DataError(path.string() + ": " + what);
  }
}

void write_output(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file_atomic(path, contents);
}

std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

/// Applies key = value pairs from --config to options of `sub` that were not
/// given on the command line. Keys use underscores for dashes.
void apply_config_file(CLI::App* sub, const std::string& path) {
  if (path.empty()) return;
  const auto text = with_path(path, [&] { return io::read_file(path); });
  const auto pairs = with_path(path, [&] { return parse_config_text(text); });
  for (const auto& [key, value] : pairs) {
    std::string name = "--" + key;
    std::replace(name.begin(), name.end(), '_', '-');
    auto* opt = sub->get_option_no_throw(name);
    if (!opt || name == "--config")
      throw UsageError(path + ": key '" + key + "' is not an option of '" + sub->get_name() + "'");
    if (opt->count() == 0) {
      opt->add_result(value);
      opt->run_callback();
    }
  }
}

// ---------------------------------------------------------------------------
// Shared option groups

struct CorpusOptions {
  std::string dir;
  std::string ads, labels, text, image;

  void add(CLI::App* sub) {
    sub->add_option("--corpus", dir, "Corpus directory (ads.jsonl, labels.csv, text.embb[, image.embb])");
    sub->add_option("--ads", ads, "Masked ads JSONL (instead of --corpus)");
    sub->add_option("--labels", labels, "Vendor labels CSV");
    sub->add_option("--text", text, "Text embedding sidecar");
    sub->add_option("--image", image, "Image embedding sidecar");
  }

  Corpus load() const {
    if (!dir.empty()) return with_path(dir, [&] { return load_corpus(dir); });
    if (ads.empty() || labels.empty() || text.empty())
      throw UsageError("give --corpus, or --ads, --labels and --text");
    return load_corpus(ads, labels, text, image.empty() ? std::nullopt : std::optional<fs::path>(image));
  }
};

/// One string option per experiment config key.
struct ExperimentOptions {
  std::map<std::string, std::string> values;

  void add(CLI::App* sub) {
    for (auto key : config_keys()) {
      if (key == "seed") continue;  // the common --seed option
      std::string name = "--" + std::string(key);
      std::replace(name.begin(), name.end(), '_', '-');
      sub->add_option(name, values[std::string(key)], "Experiment setting '" + std::string(key) + "'");
    }
  }

  ExperimentConfig build(std::optional<std::uint64_t> seed) const {
    ExperimentConfig cfg;
    for (auto key : config_keys()) {
      auto it = values.find(std::string(key));
      if (it != values.end() && !it->second.empty()) set_config_value(cfg, key, it->second);
    }
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

void print_report_table(const EvalReport& r) {
  if (r.identification) {
    const auto& c = *r.identification;
    std::printf("identification  acc %.4f  bal_acc %.4f  micro_f1 %.4f  weighted_f1 %.4f  macro_f1 %.4f  (n=%zu)\n",
                c.accuracy, c.balanced_accuracy, c.micro_f1, c.weighted_f1, c.macro_f1, c.samples);
  }
  std::printf("%-10s %6s %6s  %-16s %-16s %-16s\n", "region", "docs", "qry", "mrr@k", "r_prec@x", "macro_f1@x");
  auto cell = [](const MetricReport& m) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f+-%.4f", m.mean, m.std);
    return std::string(buf);
  };
  for (const auto& reg : r.retrieval.regions)
    std::printf("%-10s %6zu %6zu  %-16s %-16s %-16s\n", std::string(to_string(reg.region)).c_str(), reg.documents,
                reg.queries, cell(reg.metrics.mrr).c_str(), cell(reg.metrics.r_precision).c_str(),
                cell(reg.metrics.macro_f1).c_str());
  if (r.retrieval.ood)
    std::printf("%-10s %6s %6s  %-16s %-16s %-16s\n", "ood_avg", "", "", cell(r.retrieval.ood->mrr).c_str(),
                cell(r.retrieval.ood->r_precision).c_str(), cell(r.retrieval.ood->macro_f1).c_str());
  for (const auto& f : r.flags) std::printf("flag: %s\n", f.c_str());
}

AdFormat guess_format(const std::string& path, const std::string& given) {
  if (given == "jsonl") return AdFormat::jsonl;
  if (given == "csv") return AdFormat::csv;
  if (!given.empty()) throw UsageError("--format must be jsonl or csv");
  return fs::path(path).extension() == ".csv" ? AdFormat::csv : AdFormat::jsonl;
}

EmbeddingMatrix load_emb(const std::string& path) {
  return with_path(path, [&] { return load_embeddings(path); });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vendor linking and authorship attribution toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--workers", g.workers, "Cap on worker threads (0 = all cores)")->capture_default_str();
  app.add_flag("--json", g.json, "Machine-readable output on stdout");

  std::optional<std::uint64_t> seed;
  std::string config;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Random seed");
    sub->add_option("--config", config, "key = value settings file; command-line flags win");
  };

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Parse raw ads, extract identifiers and mask PII");
  std::string ingest_in, ingest_out, ingest_format;
  ingest->add_option("--input", ingest_in, "Raw ads (JSONL or CSV)")->required();
  ingest->add_option("--output", ingest_out, "Masked ads JSONL")->required();
  ingest->add_option("--format", ingest_format, "jsonl or csv (default: by extension)");
  common(ingest);

  // communities
  auto* comm = app.add_subcommand("communities", "Group ads into vendors by shared phone numbers");
  std::string comm_in, comm_out;
  std::size_t min_ads = 2;
  comm->add_option("--input", comm_in, "Masked ads JSONL")->required();
  comm->add_option("--output", comm_out, "Vendor labels CSV")->required();
  comm->add_option("--min-ads", min_ads, "Drop vendors with fewer ads")->capture_default_str();
  common(comm);

  // embed
  auto* embed = app.add_subcommand("embed", "Hash-embed ad texts, or convert an embedding file");
  std::string embed_in, embed_out, embed_import, embed_format = "binary";
  std::size_t embed_dim = 256;
  embed->add_option("--input", embed_in, "Masked ads JSONL to hash-embed");
  embed->add_option("--import", embed_import, "Existing EMB/EMBB file to convert");
  embed->add_option("--output", embed_out, "Output sidecar")->required();
  embed->add_option("--dim", embed_dim, "Hash embedding width")->capture_default_str();
  embed->add_option("--format", embed_format, "binary or text")->capture_default_str();
  common(embed);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus directory");
  SyntheticSpec spec;
  std::string synth_out, synth_regions;
  synth->add_option("--output", synth_out, "Corpus directory")->required();
  synth->add_option("--vendors", spec.vendors)->capture_default_str();
  synth->add_option("--ads-per-vendor", spec.ads_per_vendor)->capture_default_str();
  synth->add_option("--images-per-ad", spec.images_per_ad)->capture_default_str();
  synth->add_option("--spread", spec.spread)->capture_default_str();
  synth->add_option("--rho", spec.rho)->capture_default_str();
  synth->add_option("--text-dim", spec.text_dim)->capture_default_str();
  synth->add_option("--image-dim", spec.image_dim)->capture_default_str();
  synth->add_option("--regions", synth_regions, "Comma-separated regions (default South)");
  synth->add_option("--cross-region-rate", spec.cross_region_rate)->capture_default_str();
  common(synth);

  // train
  auto* train = app.add_subcommand("train", "Train the head on the training region");
  CorpusOptions train_corpus;
  ExperimentOptions train_exp;
  std::string train_ckpt, train_history;
  train_corpus.add(train);
  train_exp.add(train);
  train->add_option("--checkpoint", train_ckpt, "Output checkpoint")->required();
  train->add_option("--history", train_history, "Output training history JSON");
  common(train);

  // eval
  auto* eval = app.add_subcommand("eval", "Identification and retrieval evaluation");
  CorpusOptions eval_corpus;
  ExperimentOptions eval_exp;
  std::string eval_ckpt, eval_out;
  eval_corpus.add(eval);
  eval_exp.add(eval);
  eval->add_option("--checkpoint", eval_ckpt, "Trained head (omit for raw-embedding retrieval)");
  eval->add_option("--output", eval_out, "EvalReport JSON");
  common(eval);

  // retrieve
  auto* retrieve = app.add_subcommand("retrieve", "Top-k documents for one query");
  std::string ret_docs, ret_queries, ret_query, ret_ckpt;
  std::size_t ret_k = 10;
  retrieve->add_option("--docs", ret_docs, "Document embeddings (EMB/EMBB)")->required();
  retrieve->add_option("--queries", ret_queries, "Query embeddings (default: --docs)");
  retrieve->add_option("--query", ret_query, "Query id")->required();
  retrieve->add_option("--k", ret_k)->capture_default_str();
  retrieve->add_option("--checkpoint", ret_ckpt, "Encode both sides through a trained head");
  common(retrieve);

  // graph
  auto* graph = app.add_subcommand("graph", "Knowledge graph around one query");
  std::string gr_docs, gr_queries, gr_query, gr_mode = "mrr", gr_labels, gr_format, gr_out, gr_ckpt;
  std::size_t gr_k = 10;
  double gr_theta = 0.5;
  graph->add_option("--docs", gr_docs, "Document embeddings (EMB/EMBB)")->required();
  graph->add_option("--queries", gr_queries, "Query embeddings (default: --docs)");
  graph->add_option("--query", gr_query, "Query id")->required();
  graph->add_option("--mode", gr_mode, "mrr (top k) or r_precision (X = vendor's document count)")
      ->capture_default_str();
  graph->add_option("--k", gr_k)->capture_default_str();
  graph->add_option("--labels", gr_labels, "Vendor labels CSV (required for r_precision mode)");
  graph->add_option("--theta", gr_theta, "Document-document edge threshold")->capture_default_str();
  graph->add_option("--format", gr_format, "dot or json (default: by extension, else dot)");
  graph->add_option("--output", gr_out, "Output file")->required();
  graph->add_option("--checkpoint", gr_ckpt, "Encode both sides through a trained head");
  common(graph);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of all objectives");
  std::size_t gc_instances = 20;
  double gc_eps = 1e-5, gc_tol = 1e-4;
  gc->add_option("--instances", gc_instances)->capture_default_str();
  gc->add_option("--eps", gc_eps)->capture_default_str();
  gc->add_option("--tol", gc_tol)->capture_default_str();
  common(gc);

  // index / verify
  auto* index = app.add_subcommand("index", "Build a persisted flat index from embeddings");
  std::string idx_in, idx_out;
  index->add_option("--input", idx_in, "Embeddings (EMB/EMBB)")->required();
  index->add_option("--output", idx_out, "Index file (EMBB)")->required();
  common(index);

  auto* verify = app.add_subcommand("verify", "Recompute the checksum of an EMBB index or sidecar");
  std::string ver_in;
  verify->add_option("--input", ver_in, "EMBB file")->required();
  common(verify);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    apply_config_file(sub, config);
    const std::uint64_t s = seed.value_or(1111);
    const SearchOptions search_opt{g.workers};

    if (sub == ingest) {
      const auto fmt = guess_format(ingest_in, ingest_format);
      const auto text = with_path(ingest_in, [&] { return io::read_file(ingest_in); });
      std::istringstream in(text);
      const auto raw = with_path(ingest_in, [&] { return parse_ads(in, fmt); });
      std::vector<MaskedAd> masked;
      std::size_t with_ids = 0;
      for (const auto& ad : raw) {
        masked.push_back(mask_ad(ad));
        with_ids += masked.back().identifiers.empty() ? 0 : 1;
      }
      std::ostringstream out;
      write_masked_jsonl(out, masked);
      write_output(ingest_out, out.str());
      if (g.json)
        std::cout << dump({{"ads", masked.size()}, {"with_identifiers", with_ids}});
      else
        std::printf("ingested %zu ads (%zu with phone identifiers) -> %s\n", masked.size(), with_ids, ingest_out.c_str());
    } else if (sub == comm) {
      std::istringstream in(with_path(comm_in, [&] { return io::read_file(comm_in); }));
      auto ads = with_path(comm_in, [&] { return read_masked_jsonl(in); });
      std::erase_if(ads, [](const MaskedAd& a) { return a.identifiers.empty(); });
      const auto all = build_communities(ads);
      const auto kept = filter_min_ads(all, min_ads);
      std::ostringstream out;
      write_labels_csv(out, kept);
      write_output(comm_out, out.str());
      if (g.json)
        std::cout << dump({{"communities", all.vendor_count()}, {"vendors", kept.vendor_count()},
                           {"labelled_ads", kept.labels.size()}});
      else
        std::printf("%zu communities, %zu vendors with >= %zu ads (%zu ads) -> %s\n", all.vendor_count(),
                    kept.vendor_count(), min_ads, kept.labels.size(), comm_out.c_str());
    } else if (sub == embed) {
      if (embed_format != "binary" && embed_format != "text") throw UsageError("--format must be binary or text");
      if (embed_in.empty() == embed_import.empty()) throw UsageError("give exactly one of --input and --import");
      EmbeddingMatrix m;
      if (!embed_in.empty()) {
        std::istringstream in(with_path(embed_in, [&] { return io::read_file(embed_in); }));
        const auto ads = with_path(embed_in, [&] { return read_masked_jsonl(in); });
        std::vector<std::string> texts, ids;
        for (const auto& a : ads) {
          texts.push_back(a.text);
          ids.push_back(a.id);
        }
        HashEmbedConfig cfg;
        cfg.dim = embed_dim;
        cfg.seed = s;
        m = hash_embed_text(texts, cfg, ids);
      } else {
        m = load_emb(embed_import);
      }
      save_embeddings(embed_out, m, embed_format == "text" ? EmbFormat::text : EmbFormat::binary);
      if (g.json)
        std::cout << dump({{"rows", m.rows()}, {"dim", m.dim()}, {"normalized", m.normalized}});
      else
        std::printf("%zu x %zu embeddings -> %s\n", m.rows(), m.dim(), embed_out.c_str());
    } else if (sub == synth) {
      spec.seed = s;
      if (!synth_regions.empty()) {
        spec.regions.clear();
        for (auto part : io::split(synth_regions, ',')) {
          auto r = region_from_string(io::trim(part));
          if (!r) throw UsageError("unknown region '" + std::string(part) + "'");
          spec.regions.push_back(*r);
        }
      }
      const auto c = generate_synthetic(spec);
      save_corpus(synth_out, c);
      if (g.json)
        std::cout << dump({{"ads", c.ads.size()}, {"images", c.image.rows()}, {"vendors", c.communities.vendor_count()}});
      else
        std::printf("%zu ads, %zu images, %zu vendors -> %s\n", c.ads.size(), c.image.rows(),
                    c.communities.vendor_count(), synth_out.c_str());
    } else if (sub == train) {
      const auto cfg = train_exp.build(seed);
      const auto corpus = train_corpus.load();
      auto res = train_identification(cfg, corpus);
      save_checkpoint(train_ckpt, res.head);
      const auto hist = to_json(res.history);
      if (!train_history.empty()) write_output(train_history, dump(hist));
      if (g.json) {
        std::cout << dump(hist);
      } else {
        for (const auto& e : res.history.epochs)
          std::printf("epoch %3zu  train_loss %.6f  val_macro_f1 %.4f  %.2fs\n", e.epoch, e.train_loss,
                      e.val_macro_f1, e.seconds);
        std::printf("selected epoch %zu -> %s\n", res.history.selected_epoch, train_ckpt.c_str());
      }
    } else if (sub == eval) {
      const auto cfg = eval_exp.build(seed);
      const auto corpus = eval_corpus.load();
      std::optional<HeadParams> head;
      if (!eval_ckpt.empty()) head = with_path(eval_ckpt, [&] { return load_checkpoint(eval_ckpt); });
      const auto report = evaluate(cfg, corpus, head ? &*head : nullptr, search_opt);
      const auto text = dump(to_json(report));
      if (!eval_out.empty()) write_output(eval_out, text);
      if (g.json)
        std::cout << text;
      else
        print_report_table(report);
    } else if (sub == retrieve || sub == graph) {
      const bool is_graph = sub == graph;
      const std::string& docs_path = is_graph ? gr_docs : ret_docs;
      const std::string& q_path = (is_graph ? gr_queries : ret_queries).empty() ? docs_path
                                                                                : (is_graph ? gr_queries : ret_queries);
      const std::string& qid = is_graph ? gr_query : ret_query;
      const std::string& ckpt = is_graph ? gr_ckpt : ret_ckpt;
      std::optional<GraphMode> mode;
      if (is_graph) {
        mode = graph_mode_from_string(gr_mode);
        if (!mode) throw UsageError("--mode must be mrr or r_precision");
        if (*mode == GraphMode::r_precision && gr_labels.empty()) throw UsageError("r_precision mode needs --labels");
      }
      auto docs = load_emb(docs_path);
      auto queries = q_path == docs_path ? docs : load_emb(q_path);
      if (!ckpt.empty()) {
        const auto head = with_path(ckpt, [&] { return load_checkpoint(ckpt); });
        docs = encode(head, docs);
        queries = encode(head, queries);
      }
      const auto qpos = std::find(queries.ids.begin(), queries.ids.end(), qid);
      if (qpos == queries.ids.end()) throw DataError(q_path + ": no query with id '" + qid + "'");
      const auto qrow = queries.data.row(static_cast<std::size_t>(qpos - queries.ids.begin()));
      const auto idx = with_path(docs_path, [&] { return build_index(docs); });
      if (!is_graph) {
        if (ret_k > idx.size()) throw UsageError("--k exceeds the number of documents");
        Matrix q(1, qrow.size());
        std::copy(qrow.begin(), qrow.end(), q.row(0).begin());
        const auto hits = search(idx, q, ret_k, search_opt).front();
        if (g.json) {
          auto arr = nlohmann::ordered_json::array();
          for (std::size_t r = 0; r < hits.size(); ++r)
            arr.push_back({{"rank", r + 1}, {"id", idx.ids[hits[r].doc]}, {"score", hits[r].score}});
          std::cout << dump({{"query", qid}, {"results", arr}});
        } else {
          std::printf("%4s  %-24s %s\n", "rank", "doc", "score");
          for (std::size_t r = 0; r < hits.size(); ++r)
            std::printf("%4zu  %-24s %.6f\n", r + 1, idx.ids[hits[r].doc].c_str(), hits[r].score);
        }
      } else {
        std::size_t cutoff = gr_k;
        if (*mode == GraphMode::r_precision) {
          std::istringstream in(with_path(gr_labels, [&] { return io::read_file(gr_labels); }));
          const auto labels = with_path(gr_labels, [&] { return read_labels_csv(in); });
          const int vendor = with_path(gr_labels, [&] { return labels.label_of(qid); });
          cutoff = 0;
          for (const auto& id : idx.ids)
            if (id != qid)
              if (auto it = labels.labels.find(id); it != labels.labels.end() && it->second == vendor) ++cutoff;
        } else {
          cutoff = std::min(gr_k, idx.size() - (std::count(idx.ids.begin(), idx.ids.end(), qid) ? 1 : 0));
        }
        const auto kg = build_graph(idx, qid, qrow, *mode, cutoff, gr_theta);
        std::string fmt = gr_format;
        if (fmt.empty()) fmt = fs::path(gr_out).extension() == ".json" ? "json" : "dot";
        if (fmt != "dot" && fmt != "json") throw UsageError("--format must be dot or json");
        write_output(gr_out, fmt == "dot" ? to_dot(kg) : to_json_text(kg));
        if (g.json)
          std::cout << dump({{"nodes", kg.nodes.size()}, {"edges", kg.edges.size()}, {"cutoff", cutoff}});
        else
          std::printf("%zu nodes, %zu edges (cutoff %zu) -> %s\n", kg.nodes.size(), kg.edges.size(), cutoff,
                      gr_out.c_str());
      }
    } else if (sub == gc) {
      const auto rows = run_gradcheck_suite(s, gc_instances, gc_eps, gc_tol);
      bool ok = true;
      auto arr = nlohmann::ordered_json::array();
      if (!g.json) std::printf("%-16s %9s %14s %s\n", "loss", "instances", "max_rel_error", "result");
      for (const auto& r : rows) {
        ok = ok && r.passed;
        if (g.json)
          arr.push_back({{"loss", r.name}, {"instances", r.instances}, {"max_rel_error", r.max_rel_error},
                         {"passed", r.passed}});
        else
          std::printf("%-16s %9zu %14.3e %s\n", r.name.c_str(), r.instances, r.max_rel_error,
                      r.passed ? "PASS" : "FAIL");
      }
      if (g.json) std::cout << dump({{"tolerance", gc_tol}, {"eps", gc_eps}, {"results", arr}});
      return ok ? 0 : 2;
    } else if (sub == index) {
      const auto idx = with_path(idx_in, [&] { return build_index(load_embeddings(idx_in)); });
      save_index(idx_out, idx);
      char sum[32];
      std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(idx.checksum));
      if (g.json)
        std::cout << dump({{"rows", idx.size()}, {"dim", idx.dim()}, {"checksum", sum}});
      else
        std::printf("indexed %zu x %zu, checksum %s -> %s\n", idx.size(), idx.dim(), sum, idx_out.c_str());
    } else if (sub == verify) {
      const auto v = with_path(ver_in, [&] { return verify_index_file(ver_in); });
      char stored[32], recomputed[32];
      std::snprintf(stored, sizeof stored, "%016llx", static_cast<unsigned long long>(v.stored));
      std::snprintf(recomputed, sizeof recomputed, "%016llx", static_cast<unsigned long long>(v.recomputed));
      if (g.json)
        std::cout << dump({{"ok", v.ok}, {"stored", stored}, {"recomputed", recomputed}, {"rows", v.rows}, {"dim", v.dim}});
      else
        std::printf("%s: stored %s recomputed %s (%zu x %zu)\n", v.ok ? "OK" : "MISMATCH", stored, recomputed, v.rows,
                    v.dim);
      return v.ok ? 0 : 2;
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
