"""Task kinds and task records shared by the reward, policy and bench code."""

from __future__ import annotations

from dataclasses import dataclass, field

from .mol import Molecule, parse_smiles, write_canonical
from .props import PropertyId

UP, DOWN = "up", "down"

_PROP_KEYS = {p.value.lower(): p for p in PropertyId}


@dataclass(frozen=True)
class TaskKind:
    """One of add / del / sub (functional groups), prop_up / prop_down, multi.

    ``groups`` holds one group name (add, del) or (old, new) for sub;
    ``objectives`` holds (property, direction) pairs for property tasks.
    """
    family: str
    groups: tuple[str, ...] = ()
    objectives: tuple[tuple[PropertyId, str], ...] = ()

    def __post_init__(self):
        f = self.family
        if f not in ("add", "del", "sub", "prop_up", "prop_down", "multi"):
            raise ValueError(f"unknown task family {f!r}")
        if f in ("add", "del") and len(self.groups) != 1:
            raise ValueError(f"{f} needs exactly one group")
        if f == "sub" and (len(self.groups) != 2 or self.groups[0] == self.groups[1]):
            raise ValueError("sub needs two distinct groups")
        if f in ("prop_up", "prop_down") and len(self.objectives) != 1:
            raise ValueError(f"{f} needs exactly one objective")
        if f == "multi":
            props = [p for p, _ in self.objectives]
            if not 2 <= len(props) <= 3 or len(set(props)) != len(props):
                raise ValueError("multi needs 2-3 distinct properties")

    @property
    def is_property(self) -> bool:
        return self.family in ("prop_up", "prop_down", "multi")

    @property
    def name(self) -> str:
        if self.family in ("add", "del"):
            return f"{self.family}_{self.groups[0]}"
        if self.family == "sub":
            return f"sub_{self.groups[0]}_to_{self.groups[1]}"
        if self.family in ("prop_up", "prop_down"):
            return f"{self.family}_{self.objectives[0][0].value.lower()}"
        return "multi_" + "_".join(f"{p.value.lower()}_{d}" for p, d in self.objectives)

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "TaskKind":
        """Inverse of :attr:`name`, e.g. ``prop_up_logp`` or ``sub_hydroxyl_to_amine``."""
        t = text.strip().lower()
        for fam in ("prop_up", "prop_down"):
            if t.startswith(fam + "_"):
                key = t[len(fam) + 1:]
                if key not in _PROP_KEYS:
                    raise ValueError(f"unknown property in {text!r}")
                return cls(fam, objectives=((_PROP_KEYS[key], UP if fam == "prop_up" else DOWN),))
        if t.startswith("multi_"):
            parts = t[6:].split("_")
            if len(parts) % 2:
                raise ValueError(f"bad multi kind {text!r}")
            objs = []
            for k in range(0, len(parts), 2):
                if parts[k] not in _PROP_KEYS or parts[k + 1] not in (UP, DOWN):
                    raise ValueError(f"bad multi kind {text!r}")
                objs.append((_PROP_KEYS[parts[k]], parts[k + 1]))
            return cls("multi", objectives=tuple(objs))
        if t.startswith("sub_"):
            old, sep, new = t[4:].partition("_to_")
            if not sep:
                raise ValueError(f"bad sub kind {text!r}")
            return cls("sub", groups=(old, new))
        for fam in ("add", "del"):
            if t.startswith(fam + "_"):
                return cls(fam, groups=(t[len(fam) + 1:],))
        raise ValueError(f"cannot parse task kind {text!r}")


def prop_up(pid: PropertyId | str) -> TaskKind:
    return TaskKind("prop_up", objectives=((PropertyId(pid), UP),))


def prop_down(pid: PropertyId | str) -> TaskKind:
    return TaskKind("prop_down", objectives=((PropertyId(pid), DOWN),))


@dataclass(frozen=True, eq=False)
class TaskSpec:
    id: str
    kind: TaskKind
    m0: Molecule
    m_ref: Molecule
    instruction: str = ""
    delta: float = 0.5
    guidance_enabled: bool = True
    template_id: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def m0_smiles(self) -> str:
        return write_canonical(self.m0)

    @property
    def ref_smiles(self) -> str:
        return write_canonical(self.m_ref)

    def to_json(self) -> dict:
        k = self.kind
        return {
            "id": self.id,
            "kind": k.name,
            "family": k.family,
            "groups": list(k.groups),
            "objectives": [[p.value, d] for p, d in k.objectives],
            "instruction": self.instruction,
            "input_smiles": self.m0_smiles,
            "reference_smiles": self.ref_smiles,
            "delta": self.delta,
            "template_id": self.template_id,
            "guidance_enabled": self.guidance_enabled,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        return cls(id=str(d["id"]), kind=TaskKind.parse(d["kind"]),
                   m0=parse_smiles(d["input_smiles"]), m_ref=parse_smiles(d["reference_smiles"]),
                   instruction=d.get("instruction", ""), delta=float(d.get("delta", 0.5)),
                   guidance_enabled=bool(d.get("guidance_enabled", True)),
                   template_id=int(d.get("template_id", 0)))

    def replace(self, **changes) -> "TaskSpec":
        fields = dict(id=self.id, kind=self.kind, m0=self.m0, m_ref=self.m_ref,
                      instruction=self.instruction, delta=self.delta,
                      guidance_enabled=self.guidance_enabled, template_id=self.template_id,
                      extra=dict(self.extra))
        fields.update(changes)
        return TaskSpec(**fields)
