"""Dataset manifests (JSON lines) and BRACS label-hierarchy maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

SPLITS = ("train", "val", "test")

BRACS_CLASSES = ("Normal", "Benign", "UDH", "ADH", "FEA", "DCIS", "Invasive")
EXCLUDED = -1


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    label: int
    split: str = "train"
    graph: str | None = None
    image: str | None = None
    nuclei: str | None = None

    def key(self) -> str:
        return self.graph if self.graph is not None else f"{self.image}|{self.nuclei}"

    def to_json(self) -> dict:
        out = {k: v for k, v in (("graph", self.graph), ("image", self.image), ("nuclei", self.nuclei)) if v is not None}
        out["label"] = self.label
        out["split"] = self.split
        return out


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def validate(self, check_paths: bool = False) -> None:
        if not self.class_names:
            raise ManifestError("manifest has no class names")
        seen: dict[str, str] = {}
        for e in self.entries:
            if not 0 <= e.label < self.n_classes:
                raise ManifestError(f"label {e.label} outside 0..{self.n_classes - 1} for {e.key()}")
            if e.split not in SPLITS:
                raise ManifestError(f"unknown split {e.split!r} for {e.key()}")
            if e.graph is None and (e.image is None or e.nuclei is None):
                raise ManifestError("entry needs either 'graph' or both 'image' and 'nuclei'")
            other = seen.get(e.key())
            if other is not None and other != e.split:
                raise ManifestError(f"{e.key()} appears in both {other!r} and {e.split!r} splits")
            seen[e.key()] = e.split
            if check_paths:
                for p in (e.graph, e.image, e.nuclei):
                    if p is not None and not self.resolve(p).exists():
                        raise ManifestError(f"missing file {self.resolve(p)}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == name], list(self.class_names), self.root)

    def labels(self) -> list[int]:
        return [e.label for e in self.entries]

    def save(self, path) -> None:
        path = Path(path)
        lines = [json.dumps({"class_names": self.class_names})]
        lines += [json.dumps(e.to_json(), sort_keys=True) for e in self.entries]
        path.write_text("\n".join(lines) + "\n")


def load_manifest(path, default_split: str = "train", check_paths: bool = True) -> DatasetManifest:
    """Read a JSON-lines manifest.

    Each line is ``{"graph": ..., "label": ...}`` with an optional ``split``;
    an optional line ``{"class_names": [...]}`` names the classes (otherwise
    they are ``0..max_label``).  Relative paths resolve against the manifest's
    directory.
    """
    path = Path(path)
    entries, names = [], None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if "class_names" in obj:
            names = [str(n) for n in obj["class_names"]]
            continue
        if "label" not in obj:
            raise ManifestError(f"{path}:{lineno}: missing 'label'")
        entries.append(
            ManifestEntry(
                label=int(obj["label"]),
                split=obj.get("split", default_split),
                graph=obj.get("graph"),
                image=obj.get("image"),
                nuclei=obj.get("nuclei"),
            )
        )
    if names is None:
        names = [str(i) for i in range(max((e.label for e in entries), default=-1) + 1)]
    manifest = DatasetManifest(entries, names, path.parent)
    manifest.validate(check_paths=check_paths)
    return manifest


def merge_manifests(parts: dict[str, DatasetManifest]) -> DatasetManifest:
    """Combine per-split manifests, rejecting a graph listed under two splits."""
    names = None
    entries = []
    root = None
    for split, m in parts.items():
        if names is not None and m.class_names != names:
            raise ManifestError("manifests disagree on class names")
        names = m.class_names
        root = root or m.root
        for e in m.entries:
            entries.append(replace(e, split=split, **_absolute(m, e)))
    out = DatasetManifest(entries, list(names or []), root or Path())
    out.validate()
    return out


def _absolute(m: DatasetManifest, e: ManifestEntry) -> dict:
    return {k: str(m.resolve(v)) for k, v in (("graph", e.graph), ("image", e.image), ("nuclei", e.nuclei)) if v is not None}


# ----------------------------------------------------------------------- label maps


@dataclass(frozen=True)
class LabelMap:
    """Fine label id -> task label id, or ``EXCLUDED`` to drop the sample."""

    mapping: tuple[int, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        used = {t for t in self.mapping if t != EXCLUDED}
        if used != set(range(len(self.class_names))):
            raise ValueError("label map must be onto 0..n_task_classes-1")

    def __call__(self, fine: int) -> int:
        if not 0 <= fine < len(self.mapping):
            raise ManifestError(f"label {fine} is not covered by the label map")
        return self.mapping[fine]


def identity_map(class_names) -> LabelMap:
    return LabelMap(tuple(range(len(class_names))), tuple(class_names))


def _grouping(groups: list[tuple[str, ...]]) -> tuple[int, ...]:
    mapping = [EXCLUDED] * len(BRACS_CLASSES)
    for task_id, group in enumerate(groups):
        for cls in group:
            mapping[BRACS_CLASSES.index(cls)] = task_id
    return tuple(mapping)


FOUR_CLASS_GROUPS = [("Normal",), ("Benign", "UDH"), ("ADH", "FEA"), ("DCIS", "Invasive")]
FOUR_CLASS_MAP = LabelMap(
    _grouping(FOUR_CLASS_GROUPS), ("Normal", "NonCancerous", "Precancerous", "Cancerous")
)

# The binary decision tree; in every task the first group is label 0.
BINARY_TASKS = {
    "I-vs-rest": [("Normal", "Benign", "UDH", "ADH", "FEA", "DCIS"), ("Invasive",)],
    "NBU-vs-AFD": [("Normal", "Benign", "UDH"), ("ADH", "FEA", "DCIS")],
    "N-vs-BU": [("Normal",), ("Benign", "UDH")],
    "B-vs-U": [("Benign",), ("UDH",)],
    "AF-vs-D": [("ADH", "FEA"), ("DCIS",)],
    "A-vs-F": [("ADH",), ("FEA",)],
}


def binary_map(task: str) -> LabelMap:
    try:
        groups = BINARY_TASKS[task]
    except KeyError:
        raise ValueError(f"unknown binary task {task!r}; choose from {sorted(BINARY_TASKS)}") from None
    return LabelMap(_grouping(groups), tuple("+".join(g) for g in groups))


def label_map_by_name(name: str, class_names) -> LabelMap:
    if name == "identity":
        return identity_map(class_names)
    if tuple(class_names) != BRACS_CLASSES:
        raise ValueError(f"label map {name!r} needs the 7 BRACS classes, manifest has {list(class_names)}")
    if name == "4class":
        return FOUR_CLASS_MAP
    return binary_map(name)


def apply_label_map(label_map: LabelMap, manifest: DatasetManifest) -> DatasetManifest:
    entries = []
    for e in manifest.entries:
        task = label_map(e.label)
        if task != EXCLUDED:
            entries.append(replace(e, label=task))
    return DatasetManifest(entries, list(label_map.class_names), manifest.root)
