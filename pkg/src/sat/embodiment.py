"""Joint taxonomy, embodiment registry, and the embodied joint codebook.

A manipulator is an ordered list of joints, each tagged with a triplet
(e, f, r): embodiment id, functional category, rotation axis. The codebook
sums one learned embedding per triplet component into a per-joint row that
gives otherwise-unordered joint tokens their identity.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Functional categories (f codes) and rotation axes (r codes). Fixed
# vocabularies; synthetic embodiments and the bundled hand survey both draw
# from these.
FUNCTION_NAMES = ("CMC", "MCP", "PIP", "DIP", "WRIST", "ARM")
ROTATION_NAMES = ("FE", "AA", "PS", "PRISM")  # flexion-extension, abduction-
# adduction, pronation-supination, prismatic

V_F = len(FUNCTION_NAMES)
V_R = len(ROTATION_NAMES)


@dataclass(frozen=True)
class JointTriplet:
    """One joint's identity: (embodiment id, functional category, rotation axis)."""

    e: int
    f: int
    r: int

    def __post_init__(self):
        if self.e < 0 or self.f < 0 or self.r < 0:
            raise ValueError(f"triplet components must be non-negative: {self}")
        if self.f >= V_F:
            raise ValueError(f"functional category {self.f} outside vocabulary (0..{V_F - 1})")
        if self.r >= V_R:
            raise ValueError(f"rotation axis {self.r} outside vocabulary (0..{V_R - 1})")


@dataclass(frozen=True)
class EmbodimentSpec:
    """Ordered joint list defining one manipulator.

    joint_limits are (lo, hi) per joint in radians (length units for
    prismatic joints); only the synthetic expert consumes them.
    """

    embodiment_id: int
    name: str
    joints: tuple
    joint_limits: tuple

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ValueError("an embodiment needs at least one joint")
        if len(self.joint_limits) != len(self.joints):
            raise ValueError("joint_limits length must match joints")
        if "," in self.name or "\n" in self.name:
            raise ValueError("embodiment name may not contain ',' or newlines")
        for j in self.joints:
            if j.e != self.embodiment_id:
                raise ValueError(
                    f"joint carries e={j.e} but embodiment_id is {self.embodiment_id}"
                )
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ValueError(f"joint limit ({lo}, {hi}) is not an interval")

    @property
    def d_a(self) -> int:
        return len(self.joints)

    def f_codes(self) -> np.ndarray:
        return np.array([j.f for j in self.joints], dtype=np.int64)

    def r_codes(self) -> np.ndarray:
        return np.array([j.r for j in self.joints], dtype=np.int64)


def make_spec(embodiment_id: int, name: str, fr_pairs, joint_limits=None) -> EmbodimentSpec:
    """Build a spec from (f, r) code pairs, stamping e onto every triplet."""
    joints = tuple(JointTriplet(embodiment_id, f, r) for f, r in fr_pairs)
    if joint_limits is None:
        joint_limits = tuple((-np.pi / 2, np.pi / 2) for _ in joints)
    return EmbodimentSpec(embodiment_id, name, joints, tuple(map(tuple, joint_limits)))


class Registry:
    """Append-only embodiment registry; ids are assigned densely from 0."""

    def __init__(self, v_e: int = 32):
        self.v_e = v_e
        self._specs: list[EmbodimentSpec] = []
        self._by_name: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._specs)

    @property
    def specs(self) -> tuple:
        return tuple(self._specs)

    def get(self, embodiment_id: int) -> EmbodimentSpec:
        if not 0 <= embodiment_id < len(self._specs):
            raise KeyError(f"embodiment id {embodiment_id} not registered")
        return self._specs[embodiment_id]

    def register(self, spec: EmbodimentSpec) -> int:
        """Add a spec; its embodiment_id is reassigned to the next free id."""
        if spec.name in self._by_name:
            raise ValueError(f"embodiment name {spec.name!r} already registered")
        new_id = len(self._specs)
        if new_id >= self.v_e:
            raise ValueError(f"registry full: vocabulary V_e={self.v_e}")
        stamped = make_spec(new_id, spec.name,
                            [(j.f, j.r) for j in spec.joints], spec.joint_limits)
        self._specs.append(stamped)
        self._by_name[spec.name] = new_id
        return new_id

    # -- manifest (text form embedded in shards and checkpoints) ------------

    def to_manifest(self) -> str:
        """One joint per line: embodiment_id, name, joint_index, f, r, lo, hi."""
        lines = []
        for spec in self._specs:
            for idx, (j, (lo, hi)) in enumerate(zip(spec.joints, spec.joint_limits)):
                lines.append(
                    f"{spec.embodiment_id}, {spec.name}, {idx}, {j.f}, {j.r}, "
                    f"{lo!r}, {hi!r}"
                )
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_manifest(cls, text: str, v_e: int = 32) -> "Registry":
        rows: dict[int, list] = {}
        names: dict[int, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 7:
                raise ValueError(f"manifest line {lineno}: expected 7 fields, got {len(parts)}")
            e_id, name, idx = int(parts[0]), parts[1], int(parts[2])
            f, r = int(parts[3]), int(parts[4])
            lo, hi = float(parts[5]), float(parts[6])
            names.setdefault(e_id, name)
            if names[e_id] != name:
                raise ValueError(f"manifest line {lineno}: id {e_id} has two names")
            rows.setdefault(e_id, []).append((idx, f, r, lo, hi))
        reg = cls(v_e=v_e)
        for e_id in sorted(rows):
            if e_id != len(reg):
                raise ValueError(f"manifest embodiment ids not dense: missing id {len(reg)}")
            joints = sorted(rows[e_id])
            if [j[0] for j in joints] != list(range(len(joints))):
                raise ValueError(f"manifest id {e_id}: joint indices not dense")
            reg.register(make_spec(
                e_id, names[e_id],
                [(f, r) for _, f, r, _, _ in joints],
                [(lo, hi) for _, _, _, lo, hi in joints],
            ))
        return reg


def register_embodiment(spec: EmbodimentSpec, registry: Registry) -> int:
    return registry.register(spec)


# ---------------------------------------------------------------------------
# codebook


@dataclass
class CodebookTables:
    """The three learnable embedding tables, one per triplet component."""

    table_e: Tensor
    table_f: Tensor
    table_r: Tensor

    @classmethod
    def init(cls, v_e: int, d_feat: int, rng: np.random.Generator,
             std: float = 0.02) -> "CodebookTables":
        return cls(
            table_e=Tensor(rng.normal(0.0, std, size=(v_e, d_feat)), requires_grad=True),
            table_f=Tensor(rng.normal(0.0, std, size=(V_F, d_feat)), requires_grad=True),
            table_r=Tensor(rng.normal(0.0, std, size=(V_R, d_feat)), requires_grad=True),
        )

    @property
    def d_feat(self) -> int:
        return self.table_e.shape[1]


def codebook_embed(spec: EmbodimentSpec, tables: CodebookTables,
                   zero_e: bool = False, zero_f: bool = False,
                   zero_r: bool = False) -> Tensor:
    """Per-joint codebook rows: table_e[e] + table_f[f] + table_r[r].

    The zero_* flags substitute that component's lookup with a zero row (the
    ablation protocol); with all three zeroed the result is the zero matrix
    and joints lose all identity.
    """
    e_ids = np.full(spec.d_a, spec.embodiment_id, dtype=np.int64)
    parts = []
    if not zero_e:
        parts.append(ad.embedding_lookup(tables.table_e, e_ids))
    if not zero_f:
        parts.append(ad.embedding_lookup(tables.table_f, spec.f_codes()))
    if not zero_r:
        parts.append(ad.embedding_lookup(tables.table_r, spec.r_codes()))
    if not parts:
        return Tensor(np.zeros((spec.d_a, tables.d_feat)))
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out


def functional_frequency(specs) -> dict:
    """Histogram over (f, r) pairs across all joints of all specs."""
    specs = list(specs)
    if not specs:
        raise ValueError("functional_frequency needs at least one spec")
    counts: dict[tuple, int] = {}
    for spec in specs:
        for j in spec.joints:
            counts[(j.f, j.r)] = counts.get((j.f, j.r), 0) + 1
    return counts


def frequency_csv(counts: dict) -> str:
    """CSV rows for a (f, r) histogram, most frequent first."""
    lines = ["function,rotation,count"]
    order = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    for (f, r), n in order:
        lines.append(f"{FUNCTION_NAMES[f]},{ROTATION_NAMES[r]},{n}")
    return "\n".join(lines) + "\n"


def export_codebook(tables: CodebookTables, registry: Registry) -> str:
    """CSV with one row per registered joint carrying its summed embedding C_j.

    Values are printed with repr so a re-import reproduces codebook_embed
    output bit for bit.
    """
    d = tables.d_feat
    header = "embodiment,function,rotation," + ",".join(f"v{i}" for i in range(d))
    lines = [header]
    for spec in registry.specs:
        rows = codebook_embed(spec, tables).data
        for j, row in zip(spec.joints, rows):
            vals = ",".join(repr(float(x)) for x in row)
            lines.append(f"{spec.name},{FUNCTION_NAMES[j.f]},{ROTATION_NAMES[j.r]},{vals}")
    return "\n".join(lines) + "\n"


def load_hand_survey() -> Registry:
    """The bundled ten-hand joint inventory, as a Registry."""
    from importlib import resources

    text = resources.files("sat.data").joinpath("hand_survey.txt").read_text()
    return Registry.from_manifest(text)


def parse_codebook_csv(text: str) -> dict:
    """Inverse of export_codebook: {embodiment name: (D_a, d_feat) array}."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("embodiment,function,rotation,"):
        raise ValueError("not a codebook CSV: bad header")
    rows: dict[str, list] = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        name = parts[0]
        rows.setdefault(name, []).append([float(x) for x in parts[3:]])
    return {name: np.array(vals, dtype=np.float64) for name, vals in rows.items()}
