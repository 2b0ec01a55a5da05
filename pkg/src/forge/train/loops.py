"""Training loops: SFT over packed batches, preference tuning against a
frozen reference, and group-relative policy optimization with verifiable
rewards.

All three loops share the same driver: accumulate gradients over micro
units, clip by global norm, AdamW step, append one CSV row per optimizer
step. The global batch of the full-scale recipe maps to accumulation x
micro-batch on one worker here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..datapipe.chat import ChatSample, Message, build_loss_mask, render_chat
from ..datapipe.packing import PackedBatch
from ..model import Checkpoint, forward
from ..rng import named_rng
from ..tensor import Graph, Tensor
from ..verifiers import verify
from .losses import GrpoGroup, PreferenceBatch, dpo_loss, dpop_loss, grpo_objective, sft_loss
from .optim import adamw_step, clip_grad_norm, init_state
from .schedule import ScheduleSpec, lr_at


class NumericError(RuntimeError):
    """Loss or gradient left the finite range; the run cannot continue."""


@dataclass(frozen=True)
class TrainSettings:
    spec: ScheduleSpec
    steps: int
    accum: int = 1
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1 or self.accum < 1:
            raise ValueError("steps and accum must be >= 1")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.steps > self.spec.total_steps:
            raise ValueError(
                f"steps ({self.steps}) exceeds schedule total_steps ({self.spec.total_steps})"
            )


class _StepWriter:
    """Incremental CSV step log; floats via repr for stable round trips."""

    def __init__(self, path, fields):
        self.fields = fields
        self._f = None
        if path is not None:
            self._f = open(path, "w", newline="", encoding="utf-8")
            self._w = csv.writer(self._f)
            self._w.writerow(fields)

    def write(self, row: dict) -> None:
        if self._f is None:
            return
        self._w.writerow([row[k] if isinstance(row[k], int) else repr(row[k]) for k in self.fields])
        self._f.flush()

    def close(self) -> None:
        if self._f is not None:
            self._f.close()


def _check_finite(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"step {step}: {what} is not finite ({value})")


def _run_steps(ckpt: Checkpoint, settings: TrainSettings, micro_losses, log_fields, log_path):
    """Shared optimizer driver.

    micro_losses(step) yields, inside a fresh tape each, (scalar loss Tensor,
    extras dict) for every accumulation unit; extras are averaged into the
    step row.
    """
    state = init_state(ckpt.params)
    writer = _StepWriter(log_path, log_fields)
    rows = []
    try:
        for step in range(settings.steps):
            lr = lr_at(settings.spec, step)
            grads = {n: np.zeros_like(p.data) for n, p in ckpt.params.items()}
            loss_sum = 0.0
            extra_sums: dict[str, float] = {}
            n_micro = 0
            for build in micro_losses(step):
                with Graph() as g:
                    loss, extras = build()
                    val = float(loss.data)
                    _check_finite(val, step, "loss")
                    g.backward(loss)
                    for name, p in ckpt.params.items():
                        grad = g.grad(p)
                        if grad is not None:
                            grads[name] += grad
                loss_sum += val
                for k, v in extras.items():
                    extra_sums[k] = extra_sums.get(k, 0.0) + v
                n_micro += 1
            for name in grads:
                grads[name] /= n_micro
            try:
                grads, norm = clip_grad_norm(grads, settings.max_grad_norm)
            except ValueError as e:  # non-finite gradient
                raise NumericError(f"step {step}: {e}") from None
            adamw_step(
                ckpt.params, grads, state, lr,
                beta1=settings.beta1, beta2=settings.beta2,
                eps=settings.eps, weight_decay=settings.weight_decay,
            )
            row = {"step": step, "lr": lr, "loss": loss_sum / n_micro, "grad_norm": norm}
            for k, v in extra_sums.items():
                row[k] = v / n_micro
            rows.append(row)
            writer.write(row)
    finally:
        writer.close()
    return rows


# --- supervised fine-tuning ---

def sft_batch_loss(ckpt: Checkpoint, batch: PackedBatch) -> Tensor:
    """Next-token cross-entropy on assistant content, never across segment
    boundaries."""
    if len(batch) < 2:
        raise ValueError("packed batch too short to shift")
    logits = forward(ckpt, batch.token_ids, batch.segment_ids, batch.positions)
    shifted = T.narrow(logits, 0, 0, len(batch) - 1)
    targets = batch.token_ids[1:]
    mask = batch.loss_mask[1:] & (batch.segment_ids[:-1] == batch.segment_ids[1:])
    return sft_loss(shifted, targets, mask)


def train_sft(ckpt: Checkpoint, batches, settings: TrainSettings, log_path=None):
    """Cycle packed batches in order; one micro unit per batch."""
    if not batches:
        raise ValueError("no batches to train on")

    def micro_losses(step):
        for j in range(settings.accum):
            batch = batches[(step * settings.accum + j) % len(batches)]
            yield lambda b=batch: (sft_batch_loss(ckpt, b), {})

    return _run_steps(ckpt, settings, micro_losses, ["step", "lr", "loss", "grad_norm"], log_path)


# --- preference tuning ---

def _as_messages(raw) -> list[Message]:
    return [
        Message(role=m["role"], content=m.get("content", ""), tool_calls=m.get("tool_calls"))
        for m in raw
    ]


def load_preference_dataset(path) -> list[dict]:
    """Line-delimited {prompt, chosen, rejected}, each a chat-message list."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                pairs.append(
                    {
                        "prompt": _as_messages(rec["prompt"]),
                        "chosen": _as_messages(rec["chosen"]),
                        "rejected": _as_messages(rec["rejected"]),
                    }
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{line_no}: bad preference record ({e})") from None
    return pairs


def encode_preference_pairs(pairs, tok) -> list[dict]:
    """Token ids and response masks for both completions of each pair. The
    response mask selects assistant content after the shared prompt only."""
    out = []
    for pair in pairs:
        prompt_len = len(render_chat(ChatSample(list(pair["prompt"])), tok).token_ids)
        enc = {}
        for side in ("chosen", "rejected"):
            rendered = render_chat(ChatSample(list(pair["prompt"]) + list(pair[side])), tok)
            mask = build_loss_mask(rendered)
            mask[:prompt_len] = False
            if not mask.any():
                raise ValueError(f"{side} completion has no assistant content")
            enc[f"tokens_{side}"] = rendered.token_ids
            enc[f"mask_{side}"] = mask
        out.append(enc)
    return out


def response_logprob(ckpt: Checkpoint, tokens, response_mask) -> Tensor:
    """Summed log-prob of the masked tokens given everything before them.
    Differentiable when called under a recording tape."""
    tokens = np.asarray(tokens, dtype=np.int64)
    response_mask = np.asarray(response_mask, dtype=bool)
    n = len(tokens)
    if n < 2:
        raise ValueError("sequence too short to score")
    if response_mask[0]:
        raise ValueError("first token has no conditioning prefix")
    logits = forward(ckpt, tokens)
    logp = T.log_softmax(T.narrow(logits, 0, 0, n - 1), axis=-1)
    sel = response_mask[1:]
    onehot = np.zeros((n - 1, ckpt.config.vocab_size), dtype=logp.dtype)
    onehot[np.flatnonzero(sel), tokens[1:][sel]] = 1.0
    return T.sum_(logp * onehot)


def train_dpo(
    ckpt: Checkpoint,
    ref_ckpt: Checkpoint,
    encoded_pairs,
    settings: TrainSettings,
    variant: str = "dpo",
    beta: float = 0.1,
    lam_dpop: float = 5.0,
    log_path=None,
):
    """Preference loop; one micro unit per pair, reference scored once."""
    if variant not in ("dpo", "dpop"):
        raise ValueError(f"variant must be dpo or dpop, got {variant!r}")
    if not encoded_pairs:
        raise ValueError("no preference pairs to train on")
    loss_fn = dpo_loss if variant == "dpo" else dpop_loss

    ref_scores = [
        (
            response_logprob(ref_ckpt, e["tokens_chosen"], e["mask_chosen"]).item(),
            response_logprob(ref_ckpt, e["tokens_rejected"], e["mask_rejected"]).item(),
        )
        for e in encoded_pairs
    ]

    def pair_loss(enc, ref_c, ref_r):
        pc = response_logprob(ckpt, enc["tokens_chosen"], enc["mask_chosen"])
        pr = response_logprob(ckpt, enc["tokens_rejected"], enc["mask_rejected"])
        batch = PreferenceBatch(
            policy_chosen=T.reshape(pc, (1,)),
            policy_rejected=T.reshape(pr, (1,)),
            ref_chosen=np.array([ref_c], dtype=pc.dtype),
            ref_rejected=np.array([ref_r], dtype=pr.dtype),
            beta=beta,
            lam_dpop=lam_dpop,
        )
        return loss_fn(batch), {}

    def micro_losses(step):
        for j in range(settings.accum):
            k = (step * settings.accum + j) % len(encoded_pairs)
            yield lambda k=k: pair_loss(encoded_pairs[k], *ref_scores[k])

    return _run_steps(ckpt, settings, micro_losses, ["step", "lr", "loss", "grad_norm"], log_path)


# --- group-relative policy optimization ---

def load_rl_dataset(path) -> list[dict]:
    """Line-delimited {prompt: chat messages, verifier: math|mcq|tool, truth}."""
    problems = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                if rec["verifier"] not in ("math", "mcq", "tool"):
                    raise KeyError(f"unknown verifier {rec['verifier']!r}")
                problems.append(
                    {
                        "prompt": _as_messages(rec["prompt"]),
                        "verifier": rec["verifier"],
                        "truth": rec["truth"],
                    }
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{line_no}: bad RL record ({e})") from None
    return problems


def sample_response(
    ckpt: Checkpoint, prompt_ids, rng, max_tokens: int, temperature: float,
    stop_id: int, suppress=(),
):
    """Temperature sampling until the stop token or the budget. The stop
    token, when drawn, stays in the returned ids so every response has at
    least one scored action; ids in suppress are never drawn."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    suppress = list(suppress)
    seq = [int(t) for t in prompt_ids]
    out: list[int] = []
    for _ in range(max_tokens):
        logits = forward(ckpt, seq).numpy()[-1].astype(np.float64) / temperature
        if suppress:
            logits[suppress] = -np.inf
        z = logits - logits.max()
        p = np.exp(z)
        p /= p.sum()
        nxt = int(rng.choice(len(p), p=p))
        out.append(nxt)
        seq.append(nxt)
        if nxt == stop_id:
            break
    return out


def token_logprobs(ckpt: Checkpoint, tokens, from_pos: int) -> Tensor:
    """Per-token log-probs of tokens[from_pos:] given their prefixes; (n,)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if not (1 <= from_pos < n):
        raise ValueError(f"from_pos {from_pos} outside [1, {n})")
    logits = forward(ckpt, tokens)
    logp = T.log_softmax(T.narrow(logits, 0, 0, n - 1), axis=-1)
    rows = T.narrow(logp, 0, from_pos - 1, n - from_pos)
    onehot = np.zeros((n - from_pos, ckpt.config.vocab_size), dtype=rows.dtype)
    onehot[np.arange(n - from_pos), tokens[from_pos:]] = 1.0
    return T.sum_(rows * onehot, axis=1)


def _response_text(tok, response_ids, stop_id: int) -> str:
    ids = list(response_ids)
    if ids and ids[-1] == stop_id:
        ids = ids[:-1]
    return tok.decode(ids)


def train_grpo(
    ckpt: Checkpoint,
    ref_ckpt: Checkpoint,
    problems,
    tok,
    settings: TrainSettings,
    group_size: int = 8,
    temperature: float = 1.0,
    max_tokens: int = 16,
    clip_eps: float = 0.2,
    kl_coef: float = 0.001,
    variant: str = "grpo",
    prompts_per_step: int = 1,
    seed: int = 0,
    log_path=None,
):
    """Sample G responses per prompt, score them with the named verifier,
    and optimize the clipped group-relative surrogate with a k3 KL leash.

    The behavior policy is the policy at sampling time (one optimizer step
    per generation round), so ratios start at 1 each step.
    """
    if not problems:
        raise ValueError("no problems to train on")
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    stop_id = tok.special_id("<|end|>")
    # control tokens other than the stop are not sampleable response text
    suppress = [i for i in range(tok.base_size, tok.vocab_size) if i != stop_id]

    def build_group(step: int, slot: int, problem) -> tuple:
        prompt_ids = list(render_chat(ChatSample(list(problem["prompt"])), tok).token_ids)
        prompt_ids.append(tok.special_id("<|assistant|>"))
        rng = named_rng(seed, f"grpo/step{step}/slot{slot}")
        rollouts, rewards = [], []
        for _ in range(group_size):
            resp = sample_response(ckpt, prompt_ids, rng, max_tokens, temperature, stop_id, suppress)
            text = _response_text(tok, resp, stop_id)
            rewards.append(float(verify(problem["verifier"], text, problem["truth"]).reward))
            rollouts.append(prompt_ids + resp)
        # behavior and reference scores are tape-free snapshots
        logp_old = [token_logprobs(ckpt, seq, len(prompt_ids)).numpy() for seq in rollouts]
        logp_ref = [token_logprobs(ref_ckpt, seq, len(prompt_ids)).numpy() for seq in rollouts]
        return rollouts, len(prompt_ids), logp_old, logp_ref, np.array(rewards)

    def micro_losses(step):
        for slot in range(settings.accum * prompts_per_step):
            k = (step * settings.accum * prompts_per_step + slot) % len(problems)
            rollouts, plen, logp_old, logp_ref, rewards = build_group(step, slot, problems[k])

            def build(rollouts=rollouts, plen=plen, logp_old=logp_old, logp_ref=logp_ref, rewards=rewards):
                logp_policy = [token_logprobs(ckpt, seq, plen) for seq in rollouts]
                group = GrpoGroup(
                    logp_policy=logp_policy,
                    logp_old=logp_old,
                    logp_ref=logp_ref,
                    rewards=rewards,
                    clip_eps=clip_eps,
                    kl_coef=kl_coef,
                    variant=variant,
                    max_tokens=max_tokens,
                )
                # detached diagnostics
                k3 = [np.exp(r - o) - (r - o) - 1.0 for r, o in zip(logp_ref, logp_old)]
                extras = {
                    "mean_reward": float(rewards.mean()),
                    "mean_kl": float(np.mean(np.concatenate(k3))),
                }
                return grpo_objective(group), extras

            yield build

    fields = ["step", "lr", "loss", "grad_norm", "mean_reward", "mean_kl"]
    return _run_steps(ckpt, settings, micro_losses, fields, log_path)
