"""Activation policies and the run-time partitioner.

After modules register their descriptors, init computes one activation
probability per function, seeds the random source, runs one partitioning
round so every slot starts on a valid variant, and (unless disabled)
starts the background thread that re-partitions every wake_interval.

Policies:
  random          p = 1/k over k variants; rounds pick uniformly among all.
  profile_guided  rank by execution count; hottest 1%, coldest 100%,
                  linear in rank between, ties by registration order.
  expected_cost   p(f) = budget(f) / (Δcost(f) · count(f)) clamped to [0,1],
                  with the total budget split evenly across functions.
  fuzzing         table driven synchronously by the fuzz loop, not here.
  custom          user hooks decide probabilities and per-round choices.
"""

from __future__ import annotations

import os
import random
import threading
from dataclasses import dataclass, field
from fractions import Fraction

from .pir import PirError
from .variants import FunctionDescriptor, VariantDispatchTable

__all__ = [
    "PolicyConfig",
    "PolicyError",
    "ActivationProbabilities",
    "PolicyRuntime",
    "CustomPolicy",
    "compute_random",
    "compute_profile_guided",
    "compute_expected_cost",
    "SEED_ENV_VAR",
    "POLICIES",
]

POLICIES = ("random", "profile_guided", "expected_cost", "fuzzing", "custom")
SEED_ENV_VAR = "VARSAN_SEED"


class PolicyError(PirError):
    pass


@dataclass
class PolicyConfig:
    policy: str = "random"
    budget_fraction: float = 0.01   # expected_cost only
    wake_interval_ms: float = 10.0
    rng_seed: int | None = None
    background: bool = True         # start the async partitioner on init

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise PolicyError(f"unknown policy '{self.policy}'")
        if self.policy == "expected_cost" and not 0 < self.budget_fraction <= 1:
            raise PolicyError(
                f"budget_fraction must be in (0, 1], got {self.budget_fraction}"
            )
        if self.wake_interval_ms <= 0:
            raise PolicyError("wake_interval_ms must be positive")


@dataclass(frozen=True)
class ActivationProbabilities:
    """p_sanitized per descriptor, aligned with registration order."""

    values: tuple[float, ...]

    def __getitem__(self, i: int) -> float:
        return self.values[i]

    def __len__(self) -> int:
        return len(self.values)

    def validate(self) -> None:
        for p in self.values:
            if not 0.0 <= p <= 1.0:
                raise PolicyError(f"probability {p} outside [0, 1]")


def compute_random(descriptors: list[FunctionDescriptor]) -> ActivationProbabilities:
    return ActivationProbabilities(
        tuple(1.0 / max(len(d.variants), 1) for d in descriptors)
    )


def compute_profile_guided(
    descriptors: list[FunctionDescriptor],
) -> ActivationProbabilities:
    m = len(descriptors)
    if m == 0:
        return ActivationProbabilities(())
    if m == 1:
        return ActivationProbabilities((1.0,))
    # hottest first; ties keep registration order (stable sort)
    order = sorted(range(m), key=lambda i: -descriptors[i].exec_count)
    values = [0.0] * m
    for rank, i in enumerate(order, start=1):
        values[i] = 0.01 + (rank - 1) / (m - 1) * 0.99
    return ActivationProbabilities(tuple(values))


def compute_expected_cost(
    descriptors: list[FunctionDescriptor], budget_fraction: float
) -> ActivationProbabilities:
    """Even budget split: each function may spend total_budget/m on checks.

    p(f) = budget(f) / (Δcost(f)·count(f)) clamped to [0,1], where Δcost is
    the sanitized-minus-unsanitized static cost and the total budget is
    budget_fraction of the unsanitized baseline Σ cost(f)·count(f).
    Functions that never ran, or whose checks are free, stay sanitized.
    Exact rational arithmetic end to end; only the result is a float.
    """
    m = len(descriptors)
    if m == 0:
        return ActivationProbabilities(())
    frac = Fraction(budget_fraction).limit_denominator(10**12)
    baseline = sum(
        Fraction(d.cost_unsanitized()) * d.exec_count for d in descriptors
    )
    per_function = frac * baseline / m
    values = []
    for d in descriptors:
        delta = d.cost_sanitized() - d.cost_unsanitized()
        if d.exec_count == 0 or delta == 0:
            values.append(1.0)
            continue
        p = per_function / (Fraction(delta) * d.exec_count)
        values.append(float(min(max(p, Fraction(0)), Fraction(1))))
    return ActivationProbabilities(tuple(values))


@dataclass
class CustomPolicy:
    """User-supplied hooks resolved at init.

    load_policy(descriptors) -> probability per descriptor.
    activate_variant(rng, descriptor, p, current) -> variant name to
    activate this round; defaults to the standard u < p rule.
    """

    load_policy: object = None
    activate_variant: object = None


@dataclass
class _Entry:
    descriptor: FunctionDescriptor
    table: VariantDispatchTable
    slot: int
    p: float = 1.0


class PolicyRuntime:
    """Registration, probability computation, and the partitioning loop."""

    def __init__(self):
        self._modules: dict[str, tuple] = {}
        self._entries: list[_Entry] = []
        self._initialized = False
        self._rng: random.Random | None = None
        self._config: PolicyConfig | None = None
        self._custom: CustomPolicy | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.rounds = 0
        self.total_writes = 0

    # -- registration ----------------------------------------------------

    def register_module(
        self,
        descriptors: list[FunctionDescriptor],
        table: VariantDispatchTable,
        module_id: str | None = None,
    ) -> str:
        """Append a module's descriptors to the registry.

        Re-registering the same module identity with identical content is a
        no-op; same identity with different content is an error.
        """
        if self._initialized:
            raise PolicyError("registration after runtime init")
        for d in descriptors:
            d.validate()
        if module_id is None:
            module_id = f"module{len(self._modules)}"
        fingerprint = tuple(
            (d.function, d.slot, d.variants, d.exec_count) for d in descriptors
        )
        if module_id in self._modules:
            if self._modules[module_id][0] == fingerprint:
                return module_id
            raise PolicyError(
                f"module '{module_id}' re-registered with different content"
            )
        self._modules[module_id] = (fingerprint, descriptors, table)
        for d in descriptors:
            self._entries.append(_Entry(d, table, d.slot))
        return module_id

    @property
    def registry_size(self) -> int:
        return len(self._entries)

    @property
    def descriptors(self) -> list[FunctionDescriptor]:
        return [e.descriptor for e in self._entries]

    @property
    def probabilities(self) -> ActivationProbabilities:
        if not self._initialized:
            raise PolicyError("runtime not initialized")
        return ActivationProbabilities(tuple(e.p for e in self._entries))

    # -- init -------------------------------------------------------------

    def init(self, config: PolicyConfig, custom: CustomPolicy | None = None) -> None:
        """Four steps, in order: probabilities, RNG seed, one partitioning
        round to fill every slot, then the background partitioner."""
        if self._initialized:
            raise PolicyError("runtime already initialized")
        if not self._entries:
            raise PolicyError("no modules registered")
        config.validate()
        self._config = config
        self._custom = custom

        descriptors = self.descriptors
        if config.policy == "random":
            probs = compute_random(descriptors)
        elif config.policy == "profile_guided":
            probs = compute_profile_guided(descriptors)
        elif config.policy == "expected_cost":
            probs = compute_expected_cost(descriptors, config.budget_fraction)
        elif config.policy == "custom":
            if custom is None or custom.load_policy is None:
                raise PolicyError("custom policy requires a load_policy hook")
            raw = custom.load_policy(descriptors)
            probs = (
                raw
                if isinstance(raw, ActivationProbabilities)
                else ActivationProbabilities(tuple(float(x) for x in raw))
            )
            if len(probs) != len(descriptors):
                raise PolicyError("load_policy returned wrong-length probabilities")
        else:  # fuzzing: the fuzz loop owns activation; keep slots sanitized
            probs = ActivationProbabilities(tuple(1.0 for _ in descriptors))
        probs.validate()
        for e, p in zip(self._entries, probs.values):
            e.p = p
            # the one sanctioned write into the otherwise frozen descriptor
            object.__setattr__(e.descriptor, "activation_probability", p)

        seed = config.rng_seed
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                seed = int(env, 0)
            except ValueError:
                raise PolicyError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
        if seed is None:
            seed = int.from_bytes(os.urandom(8), "little")
        self._rng = random.Random(seed)
        self.seed = seed

        self._initialized = True
        self.partition_once()

        if config.background and config.policy != "fuzzing":
            self._stop.clear()
            self._thread = threading.Thread(
                target=self._loop, name="varsan-partitioner", daemon=True
            )
            self._thread.start()

    # -- partitioning ------------------------------------------------------

    def partition_once(self) -> int:
        """One round over the whole registry; returns slots actually written."""
        if not self._initialized:
            raise PolicyError("runtime not initialized")
        rng = self._rng
        policy = self._config.policy
        writes = 0
        for e in self._entries:
            d = e.descriptor
            if policy == "random":
                kind = d.kinds()[rng.randrange(len(d.variants))]
                name = d.name_of(kind)
            elif policy == "custom" and self._custom and self._custom.activate_variant:
                name = self._custom.activate_variant(
                    rng, d, e.p, e.table.active(e.slot)
                )
            else:
                u = rng.random()
                name = d.name_of("sanitized") if u < e.p else self._relaxed(d)
            if e.table.activate(e.slot, name):
                writes += 1
        self.rounds += 1
        self.total_writes += writes
        return writes

    @staticmethod
    def _relaxed(d: FunctionDescriptor) -> str:
        """The check-free body a slot relaxes to when checks are off."""
        for kind in ("unsanitized", "fast", "coverage"):
            try:
                return d.name_of(kind)
            except KeyError:
                continue
        return d.name_of("sanitized")

    # -- background loop ----------------------------------------------------

    def _loop(self) -> None:
        interval = self._config.wake_interval_ms / 1000.0
        while not self._stop.wait(interval):
            self.partition_once()

    @property
    def background_running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def shutdown(self) -> None:
        """Stop the background partitioner; returns within one interval."""
        if self._thread is not None:
            self._stop.set()
            self._thread.join(
                timeout=max(1.0, self._config.wake_interval_ms / 1000.0 * 10)
            )
            self._thread = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False
