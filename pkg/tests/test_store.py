import datetime as dt
import math
import random
import threading
from collections import Counter

import numpy as np
import pytest

from finrag.corpus import Chunk, Document
from finrag.gateway import EmbeddingVector
from finrag.store import (
    FilterValidationError,
    HybridIndex,
    MetadataFilter,
    ReportMetadata,
)

DIM = 16


def unit(rng: np.random.Generator) -> EmbeddingVector:
    v = rng.normal(size=DIM)
    return EmbeddingVector(v / np.linalg.norm(v))


def make_doc(doc_id, company, year, report_type="Annual Report", n_chunks=3, texts=None,
             rng=None, date=None):
    rng = rng or np.random.default_rng(abs(hash(doc_id)) % (2**32))
    doc = Document(doc_id=doc_id, source_name=f"{doc_id}.md", content="x")
    meta = ReportMetadata(
        title=f"{report_type} – {year} ({company})",
        company_name=company,
        keywords=["finance"],
        summary=f"{company} filing for {year}.",
        date=date if date is not None else dt.date(year, 12, 31),
        report_type=report_type,
    )
    texts = texts or [f"{company} filing text section {i} year {year}" for i in range(n_chunks)]
    chunks = [
        Chunk(chunk_id=f"{doc_id}:{i:04d}", doc_id=doc_id, ordinal=i, text=t)
        for i, t in enumerate(texts)
    ]
    return doc, meta, chunks, unit(rng), [unit(rng) for _ in chunks]


def fill(store, specs, rng=None):
    for spec in specs:
        store.upsert_document(*make_doc(*spec, rng=rng))


class TestUpsert:
    def test_round_trip(self):
        store = HybridIndex(dim=DIM)
        doc, meta, chunks, dv, cvs = make_doc("d1", "ACME Corp", 2023)
        store.upsert_document(doc, meta, chunks, dv, cvs)
        rec = store.get_document("d1")
        assert rec.doc == doc
        assert rec.meta == meta
        assert rec.flagged is False
        assert [store.get_chunk(c.chunk_id) for c in chunks] == chunks
        assert store.document_count == 1
        assert store.chunk_count == 3

    def test_reupsert_replaces(self):
        store = HybridIndex(dim=DIM)
        doc, meta, chunks, dv, cvs = make_doc("d1", "ACME Corp", 2023, n_chunks=5)
        store.upsert_document(doc, meta, chunks, dv, cvs)
        doc2, meta2, chunks2, dv2, cvs2 = make_doc("d1", "ACME Corp", 2023, n_chunks=2)
        store.upsert_document(doc2, meta2, chunks2, dv2, cvs2)
        assert store.chunk_count == 2
        with pytest.raises(KeyError):
            store.get_chunk("d1:0004")

    def test_dimension_mismatch_rejected_before_write(self):
        store = HybridIndex(dim=DIM)
        doc, meta, chunks, dv, cvs = make_doc("d1", "ACME Corp", 2023)
        bad = EmbeddingVector(np.ones(DIM + 1))
        with pytest.raises(ValueError):
            store.upsert_document(doc, meta, chunks, bad, cvs)
        with pytest.raises(ValueError):
            store.upsert_document(doc, meta, chunks, dv, [bad] * len(chunks))
        assert store.document_count == 0

    def test_arity_mismatch_rejected(self):
        store = HybridIndex(dim=DIM)
        doc, meta, chunks, dv, cvs = make_doc("d1", "ACME Corp", 2023)
        with pytest.raises(ValueError):
            store.upsert_document(doc, meta, chunks, dv, cvs[:-1])
        assert store.document_count == 0

    def test_delete_removes_everything(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "ACME Corp", 2023), ("d2", "Borealis Group", 2022)])
        store.delete_document("d1")
        assert store.document_count == 1
        with pytest.raises(KeyError):
            store.get_document("d1")
        with pytest.raises(KeyError):
            store.get_chunk("d1:0000")
        # postings gone: a term unique to d1's chunks no longer matches
        hits = store.sparse_search(["acme"], None, k=10)
        assert all(not cid.startswith("d1:") for cid, _ in hits)
        q = unit(np.random.default_rng(0))
        assert all(not cid.startswith("d1:") for cid, _ in store.dense_search(q, None, k=50))


class TestFilters:
    def setup_method(self):
        self.store = HybridIndex(dim=DIM)
        fill(
            self.store,
            [
                ("d1", "ACME Corp", 2023, "Annual Report"),
                ("d2", "Borealis Group", 2022, "Annual Report"),
                ("d3", "Cumulus Air", 2023, "10-K"),
            ],
        )

    def test_single_company(self):
        got = self.store.filter_documents(MetadataFilter(company_names=frozenset({"ACME Corp"})))
        assert got == {"d1"}

    def test_empty_filter_all_docs(self):
        assert self.store.filter_documents(MetadataFilter()) == {"d1", "d2", "d3"}

    def test_vacuous_date_range(self):
        f = MetadataFilter(date_range=(dt.date(1999, 1, 1), dt.date(1999, 12, 31)))
        assert self.store.filter_documents(f) == set()

    def test_conjunction(self):
        f = MetadataFilter(
            company_names=frozenset({"ACME Corp", "Cumulus Air"}),
            report_types=frozenset({"10-K"}),
            date_range=(dt.date(2023, 1, 1), dt.date(2023, 12, 31)),
        )
        assert self.store.filter_documents(f) == {"d3"}

    def test_unknown_company_rejected(self):
        with pytest.raises(FilterValidationError) as exc:
            self.store.filter_documents(MetadataFilter(company_names=frozenset({"Nonesuch"})))
        assert exc.value.field == "company_names"

    def test_unknown_report_type_rejected(self):
        with pytest.raises(FilterValidationError) as exc:
            self.store.filter_documents(MetadataFilter(report_types=frozenset({"Telegram"})))
        assert exc.value.field == "report_types"

    def test_inverted_range_rejected_at_construction(self):
        with pytest.raises(ValueError):
            MetadataFilter(date_range=(dt.date(2023, 1, 1), dt.date(2022, 1, 1)))

    def test_randomized_against_linear_scan(self):
        rng = random.Random(7)
        nrng = np.random.default_rng(7)
        store = HybridIndex(dim=DIM)
        companies = ["ACME Corp", "Borealis Group", "Cumulus Air", "Dekker NV", "Eiger AG", "Fjord AS"]
        rtypes = ["Annual Report", "Quarterly Report", "10-K"]
        metas = {}
        for i in range(40):
            company = rng.choice(companies)
            year = rng.randint(2019, 2024)
            rtype = rng.choice(rtypes)
            date = dt.date(year, rng.randint(1, 12), rng.randint(1, 28))
            doc, meta, chunks, dv, cvs = make_doc(
                f"r{i:02d}", company, year, rtype, n_chunks=1, rng=nrng, date=date
            )
            store.upsert_document(doc, meta, chunks, dv, cvs)
            metas[doc.doc_id] = meta
        for _ in range(200):
            comp = frozenset(rng.sample(companies, rng.randint(1, 3))) if rng.random() < 0.7 else None
            rts = frozenset(rng.sample(rtypes, rng.randint(1, 2))) if rng.random() < 0.5 else None
            dr = None
            if rng.random() < 0.6:
                a = dt.date(rng.randint(2019, 2024), rng.randint(1, 12), rng.randint(1, 28))
                b = dt.date(rng.randint(2019, 2024), rng.randint(1, 12), rng.randint(1, 28))
                dr = (min(a, b), max(a, b))
            f = MetadataFilter(company_names=comp, report_types=rts, date_range=dr)
            expected = {
                did
                for did, m in metas.items()
                if (comp is None or m.company_name in comp)
                and (rts is None or m.report_type in rts)
                and (dr is None or (m.date is not None and dr[0] <= m.date <= dr[1]))
            }
            assert store.filter_documents(f) == expected


def bm25_oracle(chunk_tokens, terms, k1=1.2, b=0.75):
    n = len(chunk_tokens)
    avgdl = sum(len(t) for t in chunk_tokens.values()) / n
    df = Counter()
    for toks in chunk_tokens.values():
        df.update(set(toks))
    scores = {}
    for cid, toks in chunk_tokens.items():
        s = 0.0
        for term in terms:
            tf = toks.count(term)
            if tf == 0:
                continue
            idf = math.log(1 + (n - df[term] + 0.5) / (df[term] + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(toks) / avgdl))
        if s > 0.0:
            scores[cid] = s
    return scores


def build_controlled_sparse_store():
    """20 chunks across 4 docs with controlled term frequencies."""
    filler = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"]
    rng = random.Random(3)
    nrng = np.random.default_rng(3)
    texts = []
    for i in range(20):
        toks = [filler[(i + j) % len(filler)] for j in range(6 + (i % 5))]
        if i < 3:
            toks += ["dividend"] * (i + 1)  # tf 1..3 in chunks 0..2
        if i % 4 == 0:
            toks += ["revenue"]
        rng.shuffle(toks)
        texts.append(" ".join(toks))
    store = HybridIndex(dim=DIM)
    token_map = {}
    for d in range(4):
        doc_texts = texts[d * 5 : (d + 1) * 5]
        doc, meta, chunks, dv, cvs = make_doc(
            f"s{d}", f"Company {d}", 2020 + d, n_chunks=5, texts=doc_texts, rng=nrng
        )
        store.upsert_document(doc, meta, chunks, dv, cvs)
        for c in chunks:
            token_map[c.chunk_id] = c.text.split()
    return store, token_map


class TestSparseSearch:
    def test_unique_posting_first(self):
        store, _ = build_controlled_sparse_store()
        hits = store.sparse_search(["dividend"], None, k=5)
        assert hits  # chunks 0..2 of doc s0 carry the term
        top_id, _ = hits[0]
        assert top_id.startswith("s0:")

    def test_oov_term_empty(self):
        store, _ = build_controlled_sparse_store()
        assert store.sparse_search(["xylophone"], None, k=5) == []

    def test_scores_match_oracle(self):
        store, token_map = build_controlled_sparse_store()
        for terms in (["dividend"], ["revenue"], ["dividend", "revenue"], ["alpha", "beta"]):
            expected = bm25_oracle(token_map, terms)
            got = store.sparse_search(terms, None, k=len(token_map))
            assert [cid for cid, _ in got] == sorted(
                expected, key=lambda c: (-expected[c], c)
            )
            for cid, score in got:
                assert score == pytest.approx(expected[cid], abs=1e-9)

    def test_duplicate_query_terms_double(self):
        store, _ = build_controlled_sparse_store()
        once = dict(store.sparse_search(["dividend"], None, k=20))
        twice = dict(store.sparse_search(["dividend", "dividend"], None, k=20))
        for cid, score in once.items():
            assert twice[cid] == pytest.approx(2 * score, abs=1e-9)

    def test_candidate_docs_restrict_but_keep_global_stats(self):
        store, token_map = build_controlled_sparse_store()
        full = dict(store.sparse_search(["revenue"], None, k=20))
        restricted = store.sparse_search(["revenue"], {"s1"}, k=20)
        assert restricted
        for cid, score in restricted:
            assert cid.startswith("s1:")
            assert score == pytest.approx(full[cid], abs=1e-12)

    def test_empty_terms_empty(self):
        store, _ = build_controlled_sparse_store()
        assert store.sparse_search([], None, k=5) == []


class TestDenseSearch:
    def test_self_similarity_first(self):
        store = HybridIndex(dim=DIM)
        doc, meta, chunks, dv, cvs = make_doc("d1", "ACME Corp", 2023, n_chunks=4)
        store.upsert_document(doc, meta, chunks, dv, cvs)
        hits = store.dense_search(cvs[2], None, k=1)
        assert hits[0][0] == chunks[2].chunk_id
        assert hits[0][1] == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_zero(self):
        store = HybridIndex(dim=4)
        doc = Document(doc_id="d1", source_name="d1.md", content="x")
        meta = ReportMetadata(company_name="ACME Corp", date=dt.date(2023, 12, 31))
        chunks = [Chunk(chunk_id="d1:0000", doc_id="d1", ordinal=0, text="t")]
        store.upsert_document(
            doc, meta, chunks,
            EmbeddingVector([1, 0, 0, 0]), [EmbeddingVector([0, 1, 0, 0])],
        )
        hits = store.dense_search(EmbeddingVector([1, 0, 0, 0]), None, k=1)
        assert hits[0][1] == pytest.approx(0.0, abs=1e-12)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        store = HybridIndex(dim=DIM)
        vectors = {}
        for d in range(10):
            doc, meta, chunks, dv, cvs = make_doc(f"d{d}", f"Company {d}", 2020, n_chunks=5, rng=rng)
            store.upsert_document(doc, meta, chunks, dv, cvs)
            for c, v in zip(chunks, cvs):
                vectors[c.chunk_id] = v
        q = unit(rng)
        oracle = {
            cid: float(
                np.dot(v.values.astype(np.float64), q.values.astype(np.float64))
                / (v.norm * q.norm)
            )
            for cid, v in vectors.items()
        }
        expected = sorted(oracle, key=lambda c: (-oracle[c], c))[:10]
        got = store.dense_search(q, None, k=10)
        assert [cid for cid, _ in got] == expected
        for cid, score in got:
            assert score == pytest.approx(oracle[cid], abs=1e-9)

    def test_fewer_candidates_than_k(self):
        store = HybridIndex(dim=DIM)
        doc, meta, chunks, dv, cvs = make_doc("d1", "ACME Corp", 2023, n_chunks=2)
        store.upsert_document(doc, meta, chunks, dv, cvs)
        assert len(store.dense_search(cvs[0], None, k=10)) == 2

    def test_candidate_docs_restrict(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "ACME Corp", 2023), ("d2", "Borealis Group", 2022)])
        q = unit(np.random.default_rng(5))
        hits = store.dense_search(q, {"d2"}, k=10)
        assert hits and all(cid.startswith("d2:") for cid, _ in hits)


def rrf_oracle(dense_ids, sparse_ids, k_rrf=60):
    fused = {}
    for rank, cid in enumerate(dense_ids, start=1):
        fused[cid] = fused.get(cid, 0.0) + 1.0 / (k_rrf + rank)
    for rank, cid in enumerate(sparse_ids, start=1):
        fused[cid] = fused.get(cid, 0.0) + 1.0 / (k_rrf + rank)
    return fused


class TestHybridSearch:
    def test_agreement_gives_max_fused(self):
        store, _ = build_controlled_sparse_store()
        # s0:0002 carries the highest term frequency of "dividend", so it tops
        # the sparse leg; querying with its own vector tops the dense leg too
        target = "s0:0002"
        vec = store.chunk_vector(target)
        hits = store.hybrid_search(vec, ["dividend"], None, k=3)
        top = hits[0]
        assert top.chunk_id == target
        assert top.dense_rank == 1 and top.sparse_rank == 1
        assert top.fused_score == pytest.approx(2 / 61, abs=1e-12)

    def test_single_leg_membership_score(self):
        store, _ = build_controlled_sparse_store()
        q = unit(np.random.default_rng(21))
        hits = store.hybrid_search(q, ["dividend"], None, k=25)
        # dividend appears in 3 chunks; every other chunk is dense-only
        dense_only = [h for h in hits if h.sparse_rank is None]
        assert dense_only
        for h in dense_only:
            assert h.fused_score == pytest.approx(1.0 / (60 + h.dense_rank), abs=1e-12)
        both = [h for h in hits if h.sparse_rank is not None]
        for h in both:
            assert h.fused_score == pytest.approx(
                1.0 / (60 + h.dense_rank) + 1.0 / (60 + h.sparse_rank), abs=1e-12
            )

    def test_matches_bruteforce_fusion(self):
        store, token_map = build_controlled_sparse_store()
        q = unit(np.random.default_rng(33))
        dense_full = [cid for cid, _ in store.dense_search(q, None, k=store.chunk_count)]
        sparse_full = [cid for cid, _ in store.sparse_search(["alpha", "revenue"], None, k=store.chunk_count)]
        fused = rrf_oracle(dense_full, sparse_full)
        expected = sorted(fused, key=lambda c: (-fused[c], c))[:10]
        hits = store.hybrid_search(q, ["alpha", "revenue"], None, k=10)
        assert [h.chunk_id for h in hits] == expected
        for h in hits:
            assert h.fused_score == pytest.approx(fused[h.chunk_id], abs=1e-12)
            assert h.doc_id == h.chunk_id.split(":")[0]

    def test_filter_applied_first(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "ACME Corp", 2023), ("d2", "Borealis Group", 2022)])
        q = unit(np.random.default_rng(2))
        f = MetadataFilter(company_names=frozenset({"ACME Corp"}))
        hits = store.hybrid_search(q, ["filing"], f, k=10)
        assert hits and all(h.doc_id == "d1" for h in hits)

    def test_propagates_filter_errors(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "ACME Corp", 2023)])
        with pytest.raises(FilterValidationError):
            store.hybrid_search(
                unit(np.random.default_rng(1)), ["x"],
                MetadataFilter(company_names=frozenset({"Ghost"})), k=5,
            )

    def test_determinism(self):
        store, _ = build_controlled_sparse_store()
        q = unit(np.random.default_rng(8))
        a = store.hybrid_search(q, ["alpha"], None, k=10)
        b = store.hybrid_search(q, ["alpha"], None, k=10)
        assert [(h.chunk_id, h.fused_score) for h in a] == [(h.chunk_id, h.fused_score) for h in b]


class TestFilterOptions:
    def test_reflects_store(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "ACME Corp", 2023, "10-K")])
        opts = store.filter_options()
        assert "ACME Corp" in opts.companies
        assert "10-K" in opts.report_types
        assert opts.date_min == dt.date(2023, 12, 31)

    def test_cache_hit_within_ttl(self):
        now = [1000.0]
        store = HybridIndex(dim=DIM, clock=lambda: now[0])
        fill(store, [("d1", "ACME Corp", 2023)])
        a = store.filter_options()
        now[0] += 10.0
        b = store.filter_options()
        assert store.options_recomputed == 1
        assert b.fetched_at == a.fetched_at

    def test_expiry_recomputes(self):
        now = [1000.0]
        store = HybridIndex(dim=DIM, clock=lambda: now[0], options_ttl=3600.0)
        fill(store, [("d1", "ACME Corp", 2023)])
        store.filter_options()
        now[0] += 3601.0
        b = store.filter_options()
        assert store.options_recomputed == 2
        assert b.fetched_at == 4601.0

    def test_upsert_invalidates(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "ACME Corp", 2023)])
        store.filter_options()
        fill(store, [("d2", "Borealis Group", 2022)])
        opts = store.filter_options()
        assert "Borealis Group" in opts.companies
        assert store.options_recomputed == 2


class TestCompanyMatch:
    def test_exact_and_suffixed_names(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "Novo Nordisk", 2023), ("d2", "ACME Corp", 2023)])
        name, conf = store.match_company("Novo Nordisk A/S")
        assert name == "Novo Nordisk"
        assert conf == pytest.approx(1.0, abs=1e-9)

    def test_partial_match_lower_confidence(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "Novo Nordisk", 2023), ("d2", "ACME Corp", 2023)])
        name, conf = store.match_company("Nordisk")
        assert name == "Novo Nordisk"
        assert 0.0 < conf < 1.0

    def test_empty_store(self):
        store = HybridIndex(dim=DIM)
        assert store.match_company("Anyone") is None


class TestPersistence:
    def test_round_trip_identical_results(self, tmp_path):
        path = tmp_path / "idx"
        store = HybridIndex(path=str(path), dim=DIM)
        fill(
            store,
            [
                ("d1", "ACME Corp", 2023, "Annual Report"),
                ("d2", "Borealis Group", 2022, "10-K"),
                ("d3", "Cumulus Air", 2023, "Annual Report"),
            ],
        )
        q = unit(np.random.default_rng(17))
        terms = ["filing", "acme"]
        before_dense = store.dense_search(q, None, k=9)
        before_sparse = store.sparse_search(terms, None, k=9)
        before_hybrid = [
            (h.chunk_id, h.dense_rank, h.sparse_rank, h.fused_score)
            for h in store.hybrid_search(q, terms, None, k=9)
        ]
        reopened = HybridIndex.open(str(path))
        assert reopened.document_count == 3 and reopened.chunk_count == 9
        assert reopened.dense_search(q, None, k=9) == before_dense
        assert reopened.sparse_search(terms, None, k=9) == before_sparse
        assert [
            (h.chunk_id, h.dense_rank, h.sparse_rank, h.fused_score)
            for h in reopened.hybrid_search(q, terms, None, k=9)
        ] == before_hybrid
        rec = reopened.get_document("d2")
        assert rec.meta.company_name == "Borealis Group"
        assert rec.meta.date == dt.date(2022, 12, 31)

    def test_in_memory_then_save(self, tmp_path):
        store = HybridIndex(dim=DIM)
        fill(store, [("d1", "ACME Corp", 2023)])
        target = tmp_path / "saved"
        store.save(str(target))
        reopened = HybridIndex.open(str(target))
        assert reopened.document_count == 1
        assert reopened.get_document("d1").meta.company_name == "ACME Corp"

    def test_flagged_survives_round_trip(self, tmp_path):
        path = tmp_path / "idx"
        store = HybridIndex(path=str(path), dim=DIM)
        doc, meta, chunks, dv, cvs = make_doc("d1", "ACME Corp", 2023)
        store.upsert_document(doc, meta, chunks, dv, cvs, flagged=True)
        assert HybridIndex.open(str(path)).get_document("d1").flagged is True

    def test_open_missing_path(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            HybridIndex.open(str(tmp_path / "missing"))


class TestConcurrency:
    def test_readers_never_observe_partial_upsert(self):
        store = HybridIndex(dim=DIM)
        fill(store, [("seed", "ACME Corp", 2023)])
        stop = threading.Event()
        errors = []

        def reader():
            rng = np.random.default_rng(99)
            while not stop.is_set():
                try:
                    hits = store.hybrid_search(unit(rng), ["filing"], None, k=5)
                    for h in hits:
                        store.get_chunk(h.chunk_id)  # must resolve
                    store.filter_options()
                except Exception as err:  # noqa: BLE001
                    errors.append(err)
                    return

        def writer():
            for i in range(30):
                fill(store, [(f"w{i:02d}", f"Writer Co {i}", 2020)])
            stop.set()

        threads = [threading.Thread(target=reader) for _ in range(4)]
        wt = threading.Thread(target=writer)
        for t in threads:
            t.start()
        wt.start()
        wt.join()
        for t in threads:
            t.join()
        assert not errors
        assert store.document_count == 31
