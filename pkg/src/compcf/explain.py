"""Natural-language explanations of low model competency.

Wires the competency pipeline to a multimodal language model: builds the
fixed prompt texts, queries a pluggable endpoint with the low-competency
image (optionally next to a high-competency counterfactual), grades the
returned sentence against the known degradation cause with a deterministic
keyword rubric, and emits the instruction-tuning dataset of per-cause
template explanations.

Endpoints are abstracted behind a tiny text+images -> text interface so the
whole pipeline runs offline against deterministic stubs; a real HTTP
vision-language endpoint satisfies the same interface.
"""

from __future__ import annotations

import base64
import dataclasses
import importlib.resources
import io
import json
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DisjointnessError, EndpointError
from .perturb import CAUSES, LowCompetencyCorpus

EXPLANATION_METHODS = ("None", "Reco", "LGD", "LNN")

GRID_COLUMNS = ("Method", "Spatial", "Brightness", "Contrast", "Saturation",
                "Noise", "Pixelation", "Average")

# Template explanation per (cause, direction). Directionless causes use the
# empty-string key. The finetune builder and the oracle stub both draw from
# this table, and the grading rubric treats these sentences as ground truth,
# so every sentence must grade back to its own cause.
CAUSE_TEMPLATES = {
    ("spatial", ""): "The original image contains an unfamiliar object or pattern.",
    ("brightness", "up"): "The original image is too bright.",
    ("brightness", "down"): "The original image is too dark.",
    ("contrast", "up"): "The original image has too much contrast.",
    ("contrast", "down"): "The original image has too little contrast.",
    ("saturation", "up"): "The original image is over-saturated.",
    ("saturation", "down"): "The original image is under-saturated.",
    ("noise", ""): "The original image contains too much noise.",
    ("pixelation", ""): "The original image is too pixelated.",
}

# Keyword families for deterministic grading, checked case-insensitively as
# substrings. Multi-family hits grade to none unless the text contains the
# true cause's template sentence verbatim; the families are shipped as data
# because the grading policy directly shapes the accuracy numbers.
DEFAULT_RUBRIC = {
    "spatial": ("spatial", "anomal", "unfamiliar", "unexpected object",
                "unknown object", "novel object", "unusual pattern"),
    "brightness": ("bright", "overexpos", "underexpos", "dark", "dim"),
    "contrast": ("contrast", "washed out"),
    "saturation": ("saturat", "vivid color", "muted color"),
    "noise": ("noise", "noisy", "grain", "static"),
    "pixelation": ("pixelat", "blocky", "low resolution", "compress"),
}


def _load_prompt(name: str) -> str:
    text = (importlib.resources.files("compcf") / "prompts" / name).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


@dataclasses.dataclass(frozen=True)
class PromptTemplateSet:
    """The fixed prompt texts: per-dataset context, estimator context, queries."""

    dataset_contexts: dict
    estimator_context: str
    query_without_counterfactual: str
    query_with_counterfactual: str


def load_templates() -> PromptTemplateSet:
    return PromptTemplateSet(
        dataset_contexts={
            "lunar": _load_prompt("dataset_lunar.txt"),
            "speed": _load_prompt("dataset_speed.txt"),
            "shapes": _load_prompt("dataset_shapes.txt"),
        },
        estimator_context=_load_prompt("estimator.txt"),
        query_without_counterfactual=_load_prompt("query_no_counterfactual.txt"),
        query_with_counterfactual=_load_prompt("query_with_counterfactual.txt"),
    )


def build_context(templates: PromptTemplateSet, dataset_key: str) -> str:
    """Dataset description followed by the estimator description."""
    if dataset_key not in templates.dataset_contexts:
        raise ConfigError(
            f"unknown dataset key {dataset_key!r}; "
            f"expected one of {sorted(templates.dataset_contexts)}")
    return templates.dataset_contexts[dataset_key] + "\n\n" + templates.estimator_context


def compose_side_by_side(original: np.ndarray, counterfactual: np.ndarray) -> np.ndarray:
    """Horizontal concatenation, original on the left, no separator.

    The counterfactual is bilinearly resized to the original's height if the
    heights differ; the left half of the output is always the original,
    bitwise.
    """
    if original.ndim != 3 or counterfactual.ndim != 3:
        raise DataError("compose_side_by_side expects HWC images")
    if counterfactual.shape[0] != original.shape[0]:
        from PIL import Image

        h = original.shape[0]
        w = max(1, round(counterfactual.shape[1] * h / counterfactual.shape[0]))
        pil = Image.fromarray(
            (np.clip(counterfactual, 0.0, 1.0) * 255).round().astype(np.uint8))
        counterfactual = np.asarray(
            pil.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0
    return np.concatenate([original, counterfactual], axis=1)


def encode_image_png(image: np.ndarray) -> bytes:
    """8-bit PNG bytes for endpoint transport."""
    from PIL import Image

    arr = (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


class TransientEndpointError(EndpointError):
    """Retryable endpoint failure (timeout, connection reset, 5xx)."""


class MLLMClient:
    """Interface for text+images -> text endpoints.

    `meta` carries experiment bookkeeping (image id, true cause) that real
    endpoints must ignore; deterministic stubs may read it.
    """

    endpoint_id: str = "abstract"

    def complete(self, context: str, query: str, images: list, meta: dict | None = None) -> str:
        raise NotImplementedError


class HTTPVisionClient(MLLMClient):
    """Chat-style HTTP endpoint speaking base64-PNG image parts.

    Sampling is pinned to temperature 0 so repeated experiments are as
    repeatable as the backend allows.
    """

    def __init__(self, base_url: str, model: str, api_key: str = "",
                 timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.endpoint_id = f"{self.base_url}#{model}"

    def complete(self, context, query, images, meta=None):
        import httpx

        content = [{"type": "text", "text": query}]
        for img in images:
            b64 = base64.b64encode(encode_image_png(img)).decode("ascii")
            content.append({"type": "image_url",
                            "image_url": {"url": f"data:image/png;base64,{b64}"}})
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": context},
                {"role": "user", "content": content},
            ],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = httpx.post(f"{self.base_url}/chat/completions", json=payload,
                              headers=headers, timeout=self.timeout)
        except httpx.TransportError as exc:
            raise TransientEndpointError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransientEndpointError(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise EndpointError(f"endpoint returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise EndpointError(f"malformed endpoint response: {exc}") from exc


class OracleStub(MLLMClient):
    """Answers with the true cause's template sentence; grades to 100%."""

    endpoint_id = "stub:oracle"

    def complete(self, context, query, images, meta=None):
        if not meta or "true_cause" not in meta:
            raise DataError("oracle stub needs true_cause in meta")
        cause = meta["true_cause"]
        direction = meta.get("direction", "")
        key = (cause, direction) if (cause, direction) in CAUSE_TEMPLATES else (cause, "")
        return CAUSE_TEMPLATES[key]


class StaticStub(MLLMClient):
    """Always returns one fixed sentence, whatever it is asked."""

    def __init__(self, text: str, endpoint_id: str = "stub:static"):
        self.text = text
        self.endpoint_id = endpoint_id

    def complete(self, context, query, images, meta=None):
        return self.text


class RecordingStub(MLLMClient):
    """Captures every outbound payload; answers via an inner client."""

    def __init__(self, inner: MLLMClient | None = None):
        self.inner = inner or StaticStub("The image looks fine.")
        self.calls: list[dict] = []
        self.endpoint_id = f"stub:recording({self.inner.endpoint_id})"

    def complete(self, context, query, images, meta=None):
        self.calls.append({"context": context, "query": query,
                           "images": [np.array(i, copy=True) for i in images],
                           "meta": dict(meta or {})})
        return self.inner.complete(context, query, images, meta)


class FlakyStub(MLLMClient):
    """Fails with a transient error n times, then delegates."""

    def __init__(self, failures: int, inner: MLLMClient | None = None):
        self.remaining = failures
        self.inner = inner or StaticStub("The image contains too much noise.")
        self.endpoint_id = "stub:flaky"

    def complete(self, context, query, images, meta=None):
        if self.remaining > 0:
            self.remaining -= 1
            raise TransientEndpointError("simulated transient failure")
        return self.inner.complete(context, query, images, meta)


def request_explanation(client: MLLMClient, context: str, query: str,
                        images: list, meta: dict | None = None,
                        max_attempts: int = 3, backoff: float = 0.5,
                        sleep=time.sleep) -> tuple[str, dict]:
    """One endpoint call with exponential backoff on transient failures.

    Returns (text, info) where info records the endpoint id, latency of the
    successful attempt, and the attempt count.
    """
    last: Exception | None = None
    for attempt in range(max_attempts):
        t0 = time.perf_counter()
        try:
            text = client.complete(context, query, images, meta)
        except TransientEndpointError as exc:
            last = exc
            if attempt + 1 < max_attempts:
                sleep(backoff * (2 ** attempt))
            continue
        return text, {"endpoint_id": client.endpoint_id,
                      "latency_seconds": time.perf_counter() - t0,
                      "attempts": attempt + 1}
    raise EndpointError(
        f"endpoint {client.endpoint_id} failed after {max_attempts} attempts: {last}")


def grade_explanation(text: str, true_cause: str,
                      rubric: dict | None = None) -> tuple[str | None, bool]:
    """Deterministic keyword-family grade for one explanation sentence.

    Exactly one matching family grades to that family. Multiple matches
    grade to none unless the text contains the true cause's template
    sentence, which is treated as an unambiguous statement of that cause.
    """
    if not text.strip():
        raise DataError("cannot grade empty explanation text")
    rubric = rubric or DEFAULT_RUBRIC
    lowered = text.lower()
    hits = [cause for cause, keys in rubric.items()
            if any(k in lowered for k in keys)]
    if len(hits) == 1:
        graded = hits[0]
    elif len(hits) > 1 and any(
            template.lower() in lowered
            for (cause, _), template in CAUSE_TEMPLATES.items() if cause == true_cause):
        graded = true_cause
    else:
        graded = None
    return graded, graded == true_cause


@dataclasses.dataclass
class ExplanationRecord:
    image_id: str
    method: str
    raw_text: str
    graded_cause: str | None
    correct: bool
    true_cause: str
    endpoint_id: str
    timestamp: str
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclasses.dataclass
class ExplanationGrid:
    """Per-method x per-cause accuracy table plus records and coverage."""

    accuracies: dict            # method -> {cause -> accuracy in [0,1]}
    records: list
    coverage: dict              # method -> completed / attempted
    endpoint_id: str
    rubric: dict

    def average(self, method: str) -> float:
        vals = [self.accuracies[method][c] for c in CAUSES]
        return float(np.mean(vals))

    def to_csv(self) -> str:
        lines = [",".join(GRID_COLUMNS)]
        for method in self.accuracies:
            cells = [method]
            cells += [f"{self.accuracies[method][c] * 100:.2f}%" for c in CAUSES]
            cells.append(f"{self.average(method) * 100:.2f}%")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "columns": list(GRID_COLUMNS),
            "accuracies": self.accuracies,
            "averages": {m: self.average(m) for m in self.accuracies},
            "coverage": self.coverage,
            "endpoint_id": self.endpoint_id,
            "rubric": {k: list(v) for k, v in self.rubric.items()},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _entry_direction(entry) -> str:
    factor = entry.params.get("factor")
    if factor is None:
        return ""
    return "up" if factor > 1.0 else "down"


def run_explanation_experiment(corpus: LowCompetencyCorpus, methods, est,
                               client: MLLMClient,
                               templates: PromptTemplateSet | None = None,
                               dataset_key: str = "shapes",
                               generator_cfg=None,
                               rubric: dict | None = None,
                               out_dir: Path | None = None) -> ExplanationGrid:
    """Query the endpoint per corpus image per method and grade the answers.

    method "None" sends the original image with the no-counterfactual query;
    the others generate a counterfactual, compose the side-by-side image,
    and send the with-counterfactual query. Endpoint failures are recorded
    and excluded from the accuracy denominator.
    """
    from . import counterfactuals as cf

    templates = templates or load_templates()
    rubric = rubric or DEFAULT_RUBRIC
    context = build_context(templates, dataset_key)
    methods = list(methods)
    for m in methods:
        if m not in EXPLANATION_METHODS:
            raise ConfigError(f"unknown explanation method {m!r}; "
                              f"expected subset of {EXPLANATION_METHODS}")

    accuracies: dict = {}
    coverage: dict = {}
    records: list = []
    for method in methods:
        per_cause_hits = {c: 0 for c in CAUSES}
        per_cause_total = {c: 0 for c in CAUSES}
        attempted = completed = 0
        for entry in corpus.entries:
            attempted += 1
            image_id = f"{entry.cause}_{entry.source_id}"
            meta = {"image_id": image_id, "true_cause": entry.cause,
                    "direction": _entry_direction(entry)}
            timestamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
            try:
                if method == "None":
                    images = [entry.image]
                    query = templates.query_without_counterfactual
                else:
                    result = cf.generate(method, entry.image, est, generator_cfg)
                    images = [compose_side_by_side(entry.image, result.counterfactual)]
                    query = templates.query_with_counterfactual
                text, info = request_explanation(client, context, query, images, meta)
            except EndpointError as exc:
                records.append(ExplanationRecord(
                    image_id=image_id, method=method, raw_text="",
                    graded_cause=None, correct=False, true_cause=entry.cause,
                    endpoint_id=client.endpoint_id, timestamp=timestamp,
                    error=str(exc)))
                continue
            graded, correct = grade_explanation(text, entry.cause, rubric)
            records.append(ExplanationRecord(
                image_id=image_id, method=method, raw_text=text,
                graded_cause=graded, correct=correct, true_cause=entry.cause,
                endpoint_id=info["endpoint_id"], timestamp=timestamp))
            completed += 1
            per_cause_total[entry.cause] += 1
            per_cause_hits[entry.cause] += int(correct)
        accuracies[method] = {
            c: (per_cause_hits[c] / per_cause_total[c]) if per_cause_total[c] else 0.0
            for c in CAUSES}
        coverage[method] = {"completed": completed, "attempted": attempted}

    grid = ExplanationGrid(accuracies=accuracies, records=records,
                           coverage=coverage, endpoint_id=client.endpoint_id,
                           rubric=rubric)
    if out_dir is not None:
        write_explanation_grid(grid, out_dir)
    return grid


def write_explanation_grid(grid: ExplanationGrid, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "explanation_grid.csv").write_text(grid.to_csv())
    (out_dir / "explanation_grid.json").write_text(grid.to_json())
    with open(out_dir / "explanation_records.jsonl", "w") as fh:
        for rec in grid.records:
            fh.write(rec.to_json() + "\n")


@dataclasses.dataclass
class FinetunePair:
    image_file: str
    context: str
    query: str
    target: str
    true_cause: str

    def to_json(self) -> str:
        return json.dumps({"image": self.image_file, "context": self.context,
                           "query": self.query, "target": self.target},
                          sort_keys=True)


def build_finetune_dataset(extra_corpus: LowCompetencyCorpus,
                           eval_corpus: LowCompetencyCorpus | None = None,
                           templates: PromptTemplateSet | None = None,
                           dataset_key: str = "shapes") -> list:
    """One instruction-tuning pair per image with the per-cause template text.

    The extra corpus must be disjoint from the evaluation corpus: the same
    (cause, source image) pair appearing in both leaks evaluation data into
    tuning.
    """
    templates = templates or load_templates()
    context = build_context(templates, dataset_key)
    if eval_corpus is not None:
        eval_ids = {(e.cause, e.source_id) for e in eval_corpus.entries}
        overlap = sorted(
            f"{c}_{s}" for (c, s) in
            ({(e.cause, e.source_id) for e in extra_corpus.entries} & eval_ids))
        if overlap:
            raise DisjointnessError(
                f"{len(overlap)} images shared with the evaluation corpus, "
                f"e.g. {overlap[:3]}")
    pairs = []
    for entry in extra_corpus.entries:
        direction = _entry_direction(entry)
        key = (entry.cause, direction)
        if key not in CAUSE_TEMPLATES:
            key = (entry.cause, "")
        pairs.append(FinetunePair(
            image_file=f"{entry.cause}_{entry.source_id}.png",
            context=context,
            query=templates.query_without_counterfactual,
            target=CAUSE_TEMPLATES[key],
            true_cause=entry.cause))
    return pairs


def write_finetune_dataset(pairs: list, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for pair in pairs:
            fh.write(pair.to_json() + "\n")
