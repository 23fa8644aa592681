"""Pipeline stages over a fixed artifact directory layout.

Every stage reads its declared inputs, checks their headers against the
current configuration, and writes its outputs only after refusing to
overwrite existing ones (unless forced). Inputs are checksummed before and
after the stage; one writer at a time is enforced with a lock file.
"""
from __future__ import annotations

import contextlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from .config import RunConfig
from .core.corpus import Corpus, GoldenSplit, Product, generate_corpus, split_golden
from .core.policy import CausalPolicy, greedy_summaries, sample
from .core.reward import CrossEncoderReward
from .errors import ArtifactExistsError, ArtifactLockedError, CorpusError, InputMutatedError, MissingArtifactError
from .reports.presenter import save_gain_chart, save_training_curves
from .reports.tables import REPORT_COLUMNS, SummaryExample, format_examples, format_gain_table, report_rows
from .services import dataset as dataset_service
from .services.dpo import dpo_train
from .services.grpo import grpo_train
from .services.interleave import InterleaveQuery, UserModel, ranker_from_scores, run_interleaving
from .services.persistence import (
    TrainingLog,
    artifact_header,
    check_header,
    export_report_csv,
    file_checksum,
    load_corpus,
    read_json,
    read_jsonl,
    save_corpus,
    write_json,
)
from .services.pretrain import pretrain_reference
from .services.ranking import MetricReport, evaluate, make_candidates
from .services.reward_training import train_reward

logger = logging.getLogger(__name__)

__all__ = ["ArtifactLayout", "Pipeline", "STAGES", "POLICY_TAGS"]

STAGES = (
    "gen-corpus",
    "train-reward",
    "build-dataset",
    "pretrain-policy",
    "train-grpo",
    "train-dpo",
    "eval",
    "interleave",
)

# candidate tag -> policy directory
POLICY_TAGS = {"SumRef": "ref", "RelsumGrpo": "grpo", "RelsumDpo": "dpo"}


@dataclass(frozen=True, slots=True)
class ArtifactLayout:
    root: Path

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def corpus_files(self) -> list[Path]:
        return [self.corpus_dir / name for name in ("products.jsonl", "queries.jsonl", "pairs.jsonl")]

    @property
    def reward_checkpoint(self) -> Path:
        return self.root / "reward" / "model.ckpt"

    @property
    def reward_report(self) -> Path:
        return self.root / "reward" / "training_report.json"

    @property
    def dataset_file(self) -> Path:
        return self.root / "dataset" / "train.jsonl"

    def policy_dir(self, name: str) -> Path:
        return self.root / "policy" / name

    def policy_checkpoint(self, name: str) -> Path:
        return self.policy_dir(name) / "policy.ckpt"

    def training_log(self, name: str) -> Path:
        return self.policy_dir(name) / "training_log.jsonl"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def lock_file(self) -> Path:
        return self.root / ".lock"


def _require(paths: Sequence[Path]) -> None:
    for path in paths:
        if not path.exists():
            raise MissingArtifactError(f"Missing artifact: {path} (run the stage that produces it first)")


class Pipeline:
    """Runs stages for one :class:`RunConfig` against its artifact directory."""

    def __init__(
        self,
        config: RunConfig,
        *,
        force: bool = False,
        allow_mismatch: bool = False,
        progress: bool = True,
    ) -> None:
        config.validate()
        self.config = config
        self.layout = ArtifactLayout(Path(config.artifact_dir))
        self.force = force
        self.allow_mismatch = allow_mismatch
        self.progress = progress

    # -- Guards ----------------------------------------------------------
    @contextlib.contextmanager
    def lock(self) -> Iterator[None]:
        self.layout.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.layout.lock_file, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ArtifactLockedError(
                f"{self.layout.lock_file} exists: another stage is writing to {self.layout.root}"
            ) from exc
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            yield
        finally:
            self.layout.lock_file.unlink(missing_ok=True)

    def _claim_outputs(self, paths: Sequence[Path]) -> None:
        existing = [str(path) for path in paths if path.exists()]
        if existing and not self.force:
            raise ArtifactExistsError(f"refusing to overwrite {', '.join(existing)} (pass --force)")

    @contextlib.contextmanager
    def _inputs_unchanged(self, paths: Sequence[Path]) -> Iterator[None]:
        _require(paths)
        before = {path: file_checksum(path) for path in paths}
        yield
        for path, digest in before.items():
            if file_checksum(path) != digest:
                raise InputMutatedError(f"{path} changed while the stage was running")

    def _header(self, kind: str, **extra: Any) -> dict[str, Any]:
        return artifact_header(kind, self.config, **extra)

    def _check(self, header: Mapping[str, Any], source: Path) -> None:
        check_header(header, self.config, source, allow_mismatch=self.allow_mismatch)

    # -- Loaders ---------------------------------------------------------
    def load_corpus(self) -> Corpus:
        _require(self.layout.corpus_files)
        corpus, header = load_corpus(self.layout.corpus_dir)
        self._check(header, self.layout.corpus_files[0])
        return corpus

    def load_reward(self) -> CrossEncoderReward:
        _require([self.layout.reward_checkpoint])
        model, header = CrossEncoderReward.load(self.layout.reward_checkpoint)
        self._check(header, self.layout.reward_checkpoint)
        return model

    def load_policy(self, name: str, *, trainable: bool = False) -> CausalPolicy:
        path = self.layout.policy_checkpoint(name)
        _require([path])
        policy, header = CausalPolicy.load(path, requires_grad=trainable)
        self._check(header, path)
        return policy

    def golden(self, corpus: Corpus) -> GoldenSplit:
        return split_golden(corpus.queries_in("eval"), corpus.pairs_in("eval"), self.config.corpus.tail_fraction)

    # -- Stages ----------------------------------------------------------
    def gen_corpus(self) -> Corpus:
        self._claim_outputs(self.layout.corpus_files)
        corpus = generate_corpus(self.config.corpus, self.config.root_seed)
        save_corpus(self.layout.corpus_dir, corpus, self._header("corpus"))
        return corpus

    def train_reward(self) -> CrossEncoderReward:
        self._claim_outputs([self.layout.reward_checkpoint])
        with self._inputs_unchanged(self.layout.corpus_files):
            corpus = self.load_corpus()
            model, report = train_reward(corpus, self.config.reward, self.config.root_seed, progress=self.progress)
            model.save(self.layout.reward_checkpoint, self._header("reward", heldout_mae=report.heldout_mae))
            write_json(self.layout.reward_report, {"header": self._header("reward_report"), **report.to_payload()})
        logger.info("reward model frozen with held-out mean |r - l| %.4f", report.heldout_mae)
        return model

    def build_dataset(self) -> list[dataset_service.TrainRow]:
        self._claim_outputs([self.layout.dataset_file])
        with self._inputs_unchanged([*self.layout.corpus_files, self.layout.reward_checkpoint]):
            corpus = self.load_corpus()
            reward = self.load_reward()
            rows, stats = dataset_service.build(corpus, reward, self.config.dataset.tau, self.config.root_seed)
            dataset_service.save_dataset(self.layout.dataset_file.parent, rows, stats, self._header("dataset"))
        return rows

    def load_dataset(self) -> list[dataset_service.TrainRow]:
        _require([self.layout.dataset_file])
        rows, header = dataset_service.load_dataset(self.layout.dataset_file.parent)
        self._check(header, self.layout.dataset_file)
        return rows

    def pretrain_policy(self) -> CausalPolicy:
        path = self.layout.policy_checkpoint("ref")
        self._claim_outputs([path])
        with self._inputs_unchanged(self.layout.corpus_files):
            corpus = self.load_corpus()
            policy, report = pretrain_reference(
                corpus, self.config.policy, self.config.pretrain, self.config.root_seed, progress=self.progress
            )
            policy.save(path, self._header("policy", role="ref"))
            write_json(self.layout.policy_dir("ref") / "pretrain_report.json", {"header": self._header("pretrain_report"), **report.to_payload()})
        return policy

    def _train_policy(self, method: str) -> CausalPolicy:
        out = self.layout.policy_checkpoint(method)
        self._claim_outputs([out])
        inputs = [self.layout.dataset_file, self.layout.reward_checkpoint, self.layout.policy_checkpoint("ref")]
        with self._inputs_unchanged(inputs):
            rows = self.load_dataset()
            reward = self.load_reward()
            policy = self.load_policy("ref", trainable=True)
            section = self.config.grpo if method == "grpo" else self.config.dpo
            header = self._header(f"{method}_training_log", G=section.G)
            trainer = grpo_train if method == "grpo" else dpo_train
            with TrainingLog(self.layout.training_log(method), header) as log:
                trained, _ = trainer(
                    rows,
                    policy,
                    reward,
                    section,
                    self.config.root_seed,
                    log=log,
                    checkpoint_dir=self.layout.policy_dir(method) / "checkpoints",
                    header=self._header("policy", role=method),
                    progress=self.progress,
                )
            trained.save(out, self._header("policy", role=method))
        return trained

    def train_grpo(self) -> CausalPolicy:
        return self._train_policy("grpo")

    def train_dpo(self) -> CausalPolicy:
        return self._train_policy("dpo")

    # -- Evaluation ------------------------------------------------------
    def summary_table(self, tag: str, policy: CausalPolicy, products: Sequence[Product]) -> dict[str, tuple[str, ...]]:
        """Greedy summaries, or one seeded sample per product when ``eval.sample_summaries`` is set."""

        settings = self.config.eval
        if not settings.sample_summaries:
            return greedy_summaries(policy, products)
        table: dict[str, tuple[str, ...]] = {}
        for index, product in enumerate(sorted(products, key=lambda p: p.id)):
            rollout = sample(
                policy, policy.encode_prompt(product), 1, settings.sample_temperature, self.config.root_seed,
                indices=(index,), stage=f"eval-{tag}",
            )[0]
            table[product.id] = tuple(policy.vocab.decode(rollout.summary_ids))
        return table

    def _eval_inputs(self, tags: Sequence[str]) -> list[Path]:
        paths = [*self.layout.corpus_files, self.layout.reward_checkpoint]
        paths.extend(self.layout.policy_checkpoint(POLICY_TAGS[tag]) for tag in tags if tag in POLICY_TAGS)
        return paths

    def _summaries(self, products: Sequence[Product], tags: Sequence[str]) -> dict[str, dict[str, tuple[str, ...]]]:
        return {
            tag: self.summary_table(tag, self.load_policy(POLICY_TAGS[tag]), products)
            for tag in tags
            if tag in POLICY_TAGS
        }

    def evaluate(self) -> MetricReport:
        reports = self.layout.reports_dir
        outputs = [reports / name for name in ("report.json", "report.txt", "report.csv", "examples.txt", "gains.png")]
        self._claim_outputs(outputs)
        tags = list(POLICY_TAGS)
        with self._inputs_unchanged(self._eval_inputs(tags)):
            corpus = self.load_corpus()
            reward = self.load_reward()
            golden = self.golden(corpus)
            products = {p.id: p for p in corpus.products}
            pool = [products[pid] for pid in sorted({p.product_id for p in golden.full_pairs})]
            summaries = self._summaries(pool, tags)
            candidates = make_candidates(reward.config.context_budget, summaries)
            report = evaluate(candidates, golden, reward, products, self.config.eval)

            write_json(reports / "report.json", {"header": self._header("report"), **report.to_payload()})
            (reports / "report.txt").write_text(format_gain_table(report), encoding="utf-8")
            export_report_csv(reports / "report.csv", report_rows(report), REPORT_COLUMNS)
            (reports / "examples.txt").write_text(
                format_examples(self._examples(corpus, golden, summaries)), encoding="utf-8"
            )
            save_gain_chart(reports / "gains.png", report)
            logs = {
                method: read_jsonl(self.layout.training_log(method))[1]
                for method in ("grpo", "dpo")
                if self.layout.training_log(method).exists()
            }
            if logs:
                save_training_curves(reports / "training_curves.png", logs)
        logger.info("wrote evaluation reports to %s", reports)
        return report

    def _examples(
        self,
        corpus: Corpus,
        golden: GoldenSplit,
        summaries: Mapping[str, Mapping[str, tuple[str, ...]]],
    ) -> list[SummaryExample]:
        by_query = corpus.pairs_by_query()
        examples: list[SummaryExample] = []
        for query in sorted(golden.tail_queries, key=lambda q: q.id)[: self.config.eval.examples]:
            pairs = by_query.get(query.id, [])
            if not pairs:
                continue
            best = max(pairs, key=lambda p: (p.rating, p.product_id))
            product = corpus.product(best.product_id)
            examples.append(SummaryExample(query, product, {tag: table[product.id] for tag, table in summaries.items()}))
        return examples

    def summarize(self, product_id: str) -> str:
        """Title, description and every available policy's summary of one product."""

        corpus = self.load_corpus()
        product = corpus.product(product_id)
        tags = [tag for tag, name in POLICY_TAGS.items() if self.layout.policy_checkpoint(name).exists()]
        if not tags:
            raise MissingArtifactError(f"Missing artifact: {self.layout.policy_checkpoint('ref')} (no trained policy)")
        summaries = {tag: self.summary_table(tag, self.load_policy(POLICY_TAGS[tag]), [product])[product.id] for tag in tags}
        query = None
        rated = [p for p in corpus.pairs if p.product_id == product_id]
        if rated:
            best = max(rated, key=lambda p: (p.rating, p.query_id))
            query = corpus.query(best.query_id)
        return format_examples([SummaryExample(query, product, summaries)])

    # -- Interleaving ----------------------------------------------------
    def interleave(self, *, uniform_queries: bool = False) -> dict[str, Any]:
        settings = self.config.interleave
        settings.validate()
        out = self.layout.reports_dir / "interleave_report.json"
        self._claim_outputs([out])
        tags = [settings.control, settings.variation]
        for tag in tags:
            if tag not in ("None", "Desc", *POLICY_TAGS):
                raise CorpusError(f"unknown interleaving candidate '{tag}'")
        with self._inputs_unchanged(self._eval_inputs(tags)):
            corpus = self.load_corpus()
            reward = self.load_reward()
            golden = self.golden(corpus)
            products = {p.id: p for p in corpus.products}
            pool = [products[pid] for pid in sorted({p.product_id for p in golden.full_pairs})]
            candidates = {c.tag: c for c in make_candidates(reward.config.context_budget, self._summaries(pool, tags))}

            pairs = sorted(golden.full_pairs, key=lambda p: (p.query_id, p.product_id))
            tokens = {q.id: q.tokens for q in golden.full_queries}
            rankers = {}
            for tag in tags:
                contexts = [candidates[tag].context_for(products[p.product_id]) for p in pairs]
                scores = reward.score_batch([tokens[p.query_id] for p in pairs], contexts)
                rankers[tag] = ranker_from_scores({(p.query_id, p.product_id): float(s) for p, s in zip(pairs, scores)})

            by_query = corpus.pairs_by_query()
            queries = [
                InterleaveQuery(
                    query_id=q.id,
                    candidates=tuple(sorted(p.product_id for p in by_query.get(q.id, []))),
                    ratings={p.product_id: p.rating for p in by_query.get(q.id, [])},
                    traffic_weight=q.weight,
                )
                for q in golden.full_queries
                if by_query.get(q.id)
            ]
            report = run_interleaving(
                rankers[settings.control],
                rankers[settings.variation],
                queries,
                UserModel.from_config(settings),
                settings.n_sessions,
                self.config.root_seed,
                traffic_weighted=settings.traffic_weighted and not uniform_queries,
                progress=self.progress,
            )
            payload = {
                "header": self._header("interleave_report", control=settings.control, variation=settings.variation),
                **report.to_payload(),
            }
            write_json(out, payload)
        return payload

    # -- Everything ------------------------------------------------------
    def run(self, stage: str, **options: Any) -> object:
        handlers = {
            "gen-corpus": self.gen_corpus,
            "train-reward": self.train_reward,
            "build-dataset": self.build_dataset,
            "pretrain-policy": self.pretrain_policy,
            "train-grpo": self.train_grpo,
            "train-dpo": self.train_dpo,
            "eval": self.evaluate,
            "interleave": lambda: self.interleave(**options),
        }
        if stage not in handlers:
            raise KeyError(f"unknown stage '{stage}'")
        with self.lock():
            logger.info("stage %s (seed %d, config %s)", stage, self.config.root_seed, self.config.config_hash()[:12])
            return handlers[stage]()

    def run_all(self, **options: Any) -> dict[str, Any]:
        results: dict[str, Any] = {}
        for stage in STAGES:
            results[stage] = self.run(stage, **(options if stage == "interleave" else {}))
        return results

    def read_report(self) -> dict[str, Any]:
        return read_json(self.layout.reports_dir / "report.json")
