"""
Training harness
================
One optimizer step runs two student forwards over the same images:

  1. the multimodal sequence [vision prefix | BOS COLOR AT r c answer EOS]
     under the mixed layout, supervised by the LM loss on the answer rows;
  2. the packed visual sequence: the images' vision tokens, partially
     replaced by the mask embedding, packed ``images_per_pack`` at a time
     under the diagonally blocked layout. Its visual logits are matched
     against the EMA teacher's logits for the unmasked packed sequence.

Forward 2 and the teacher only run when the mode activates a visual loss.
Batches, masks and initial weights come from substreams of the run seed
keyed by step, so prefetching never changes the data stream.
"""

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import torch
from pydantic import ValidationError

import settings
from exceptions import FormatError, RejectedInputError, TeacherFault, TrainingAborted
from geometry.masking import MaskPlan, apply_mask, draw_mask, ratio_at
from geometry.spatial import (
    AttentionLayout,
    build_mixed_layout,
    build_packed_layout,
    text_segment,
    vision_segment,
)
from models import ForwardTrace, MicroMLLM
from schemas import MetricRecord, OptimizerConfig, TrainConfig
from substrate.lvtd import load_checkpoint, save_checkpoint
from substrate.tensor_ops import Rng
from training import ema_teacher
from training.ema_teacher import TeacherState, decay_at, init_teacher, maybe_update
from training.objectives import LossTerm, cga_loss, ga_loss, lm_loss, mim_loss, total_loss
from diagnostics.measures import attention_allocation, homogenization_profile
from data.synth_data import EOS, PROMPT_LEN, SampleBatch, Vocabulary, generate_batch, vocabulary_for

logger = logging.getLogger(__name__)

# substream keys under the run seed
INIT_STREAM, DATA_STREAM, MASK_STREAM = 0, 1, 2
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.lvck"


# ── schedules ─────────────────────────────────────────────────────────────────

def lr_at(cfg: OptimizerConfig, step: int, total_steps: int) -> float:
    """Linear warmup over ``warmup_ratio`` of the run, then cosine decay to ``lr * min_lr_ratio``."""
    if total_steps <= 0:
        return cfg.lr
    if not 0 <= step < total_steps:
        raise RejectedInputError(f"step {step} outside [0, {total_steps})")
    warmup = math.ceil(cfg.warmup_ratio * total_steps)
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    floor = cfg.lr * cfg.min_lr_ratio
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ── sequences ─────────────────────────────────────────────────────────────────

def text_tokens(batch: SampleBatch) -> torch.Tensor:
    """[B, P+2]: prompt, answer, EOS."""
    count = len(batch)
    return torch.cat(
        [batch.prompts, batch.answers.unsqueeze(1), torch.full((count, 1), EOS, dtype=batch.prompts.dtype)], dim=1
    )


def multimodal_layout(config: TrainConfig, text_len: int) -> AttentionLayout:
    rows, cols = config.model.grid
    return build_mixed_layout(
        [vision_segment(rows, cols), text_segment(text_len)],
        mixed=config.mixed_attention,
        rope_2d=config.rope_2d,
    )


def packed_layout(config: TrainConfig) -> AttentionLayout:
    rows, cols = config.model.grid
    images = [vision_segment(rows, cols, i) for i in range(config.data.images_per_pack)]
    return build_packed_layout(images, config.data.pad_to, rope_2d=config.rope_2d)


def pack_tokens(vision_tokens: torch.Tensor, images_per_pack: int, pad_to: int) -> torch.Tensor:
    """[B, N, D] -> [B / k, pad_to, D]; pads are zero vectors after the k images."""
    count, n, d = vision_tokens.shape
    if count % images_per_pack:
        raise RejectedInputError(f"{count} images do not split into packs of {images_per_pack}")
    packed = vision_tokens.reshape(count // images_per_pack, images_per_pack * n, d)
    pad = pad_to - images_per_pack * n
    if pad < 0:
        raise RejectedInputError(f"{images_per_pack * n} vision tokens overflow packed length {pad_to}")
    if pad:
        packed = torch.cat([packed, packed.new_zeros(packed.shape[0], pad, d)], dim=1)
    return packed


def unpack_logits(visual_logits: torch.Tensor, images_per_pack: int) -> torch.Tensor:
    """[packs, k * N, D_v] -> [packs * k, N, D_v]."""
    packs, tokens, dim = visual_logits.shape
    return visual_logits.reshape(packs * images_per_pack, tokens // images_per_pack, dim)


def answer_query_position(config: TrainConfig, prompt_len: int = PROMPT_LEN) -> int:
    """Sequence position whose logits predict the answer token."""
    return config.model.n_vision_tokens + prompt_len - 1


def multimodal_forward(
    model: MicroMLLM, config: TrainConfig, batch: SampleBatch, capture: bool = False
) -> Tuple[ForwardTrace, torch.Tensor, torch.Tensor]:
    """Returns (trace, next-token logit rows [B, P+2, vocab], targets [B, P+2])."""
    targets = text_tokens(batch)
    layout = multimodal_layout(config, targets.shape[1])
    sequence = torch.cat([model.embed_image(batch.pixels), model.embed_text(targets)], dim=1)
    trace = model(sequence, layout, capture=capture)
    # row t predicts text token t from the position just before it
    rows = config.model.n_vision_tokens - 1 + torch.arange(targets.shape[1])
    return trace, trace.text_logits.index_select(-2, rows), targets


# ── state ─────────────────────────────────────────────────────────────────────

@dataclass
class TrainState:
    config: TrainConfig
    model: MicroMLLM
    teacher: TeacherState
    optimizer: torch.optim.Optimizer
    rng: Rng
    vocab: Vocabulary
    step: int = 0
    last_record: Optional[MetricRecord] = None
    teacher_evaluations: int = 0


def init_state(config: TrainConfig) -> TrainState:
    rng = Rng(config.seed)
    vocab = vocabulary_for(config.model, config.data)
    model = MicroMLLM(config.model, rng.spawn(INIT_STREAM))
    opt = config.optimizer
    optimizer = torch.optim.Adam(model.parameters(), lr=opt.lr, betas=opt.betas, weight_decay=opt.weight_decay)
    return TrainState(
        config=config,
        model=model,
        teacher=init_teacher(model),
        optimizer=optimizer,
        rng=rng,
        vocab=vocab,
    )


def make_batch(config: TrainConfig, step: int) -> SampleBatch:
    return generate_batch(Rng(config.seed).spawn(DATA_STREAM, step), config.model, config.data, config.batch_size)


def draw_masks(config: TrainConfig, step: int, count: int, ratio: float) -> List[MaskPlan]:
    rng = Rng(config.seed).spawn(MASK_STREAM, step)
    return [draw_mask(rng, config.model.n_vision_tokens, ratio, image_id=i) for i in range(count)]


# ── one step ──────────────────────────────────────────────────────────────────

def _visual_terms(
    state: TrainState, batch: SampleBatch, ratio: float, active: Tuple[str, ...]
) -> Tuple[Dict[str, LossTerm], Optional[torch.Tensor]]:
    config = state.config
    model = state.model
    k, pad_to = config.data.images_per_pack, config.data.pad_to
    layout = packed_layout(config)

    plans = draw_masks(config, state.step, len(batch), ratio)
    vision = model.embed_image(batch.pixels)
    masked = torch.stack([apply_mask(tokens, plan, model.mask_embedding) for tokens, plan in zip(vision, plans)])
    student = unpack_logits(model(pack_tokens(masked, k, pad_to), layout).visual_logits, k)

    teacher_model = state.teacher.params
    with torch.no_grad():
        teacher_tokens = pack_tokens(teacher_model.embed_image(batch.pixels), k, pad_to)
    target = unpack_logits(ema_teacher.teacher_visual_logits(state.teacher, teacher_tokens, layout), k)
    state.teacher_evaluations += 1
    if target.shape != student.shape:
        raise TeacherFault(f"teacher logits {tuple(target.shape)} vs student {tuple(student.shape)}")

    terms: Dict[str, LossTerm] = {}
    if "mim" in active:
        mask = torch.stack([plan.mask for plan in plans])
        terms["mim"] = mim_loss(student, target, mask, config.temps)
    n_packs = len(batch) // k
    for name, fn in (("ga", ga_loss), ("cga", cga_loss)):
        if name in active:
            term = fn(student, target)
            # per-image sums, averaged over packed sequences
            terms[name] = LossTerm(term.value / n_packs, term.grad / n_packs)
    return terms, student


def train_step(state: TrainState, batch: SampleBatch) -> MetricRecord:
    config = state.config
    started = time.perf_counter()
    step = state.step
    lr = lr_at(config.optimizer, step, config.steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    ratio = ratio_at(config.mask, min(step, config.mask.total_steps))
    active = config.active_losses

    state.model.train()
    _, lm_rows, targets = multimodal_forward(state.model, config, batch)
    terms: Dict[str, LossTerm] = {"lm": lm_loss(lm_rows, targets, batch.prompt_len)}
    student_visual = None
    if any(name in active for name in ("mim", "ga", "cga")):
        visual_terms, student_visual = _visual_terms(state, batch, ratio, active)
        terms.update(visual_terms)

    report = total_loss(terms, config.weights, active)
    if not math.isfinite(report.total):
        raise TrainingAborted(step, state.last_record)

    tensors, grads = [lm_rows], [report.grads["text_logits"]]
    if student_visual is not None:
        tensors.append(student_visual)
        grads.append(report.grads["visual_logits"])
    state.optimizer.zero_grad(set_to_none=True)
    torch.autograd.backward(tensors, grads)
    if config.optimizer.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), config.optimizer.grad_clip)
    state.optimizer.step()

    state.step = step + 1
    maybe_update(state.teacher, state.model, config.ema, state.step)
    record = MetricRecord(
        step=state.step,
        **report.as_dict(),
        mask_ratio=ratio,
        ema_decay=decay_at(config.ema, min(state.step, config.ema.total_steps)),
        lr=lr,
        wall_clock=None if settings.DETERMINISTIC else time.perf_counter() - started,
    )
    state.last_record = record
    logger.debug("step %d total=%.5f lm=%.5f mim=%.5f cga=%.5f", record.step, record.total, record.lm, record.mim, record.cga)
    return record


# ── evaluation ────────────────────────────────────────────────────────────────

def answer_accuracy(rows: torch.Tensor, batch: SampleBatch) -> float:
    """Fraction of samples whose argmax prediction at the answer row is the true colour."""
    predictions = rows[:, batch.prompt_len].argmax(-1)
    return float((predictions == batch.answers).double().mean())


@torch.no_grad()
def evaluate_accuracy(model: MicroMLLM, config: TrainConfig, batch: SampleBatch) -> float:
    model.eval()
    _, rows, _ = multimodal_forward(model, config, batch)
    return answer_accuracy(rows, batch)


def probe_batch(config: TrainConfig) -> SampleBatch:
    return generate_batch(Rng(config.data.probe_seed), config.model, config.data, config.data.probe_count)


@torch.no_grad()
def probe_metrics(model: MicroMLLM, config: TrainConfig, batch: SampleBatch) -> Dict[str, object]:
    model.eval()
    trace, rows, _ = multimodal_forward(model, config, batch, capture=True)
    query = torch.tensor([answer_query_position(config, batch.prompt_len)])
    return {
        "cosine_profile": homogenization_profile(trace),
        "attention_allocation": attention_allocation(trace, trace.layout.vision_positions, query),
        "accuracy": answer_accuracy(rows, batch),
        "trace": trace,
    }


# ── checkpoints ───────────────────────────────────────────────────────────────

def named_tensors(state: TrainState) -> Dict[str, torch.Tensor]:
    tensors = {f"student/{name}": t.detach() for name, t in state.model.state_dict().items()}
    tensors.update({f"teacher/{name}": t.detach() for name, t in state.teacher.params.state_dict().items()})
    return tensors


def save_state(state: TrainState, path: Union[str, Path]) -> Path:
    path = Path(path)
    save_checkpoint(path, {"config": state.config.model_dump(mode="json"), "step": state.step}, named_tensors(state))
    return path


def load_models(path: Union[str, Path]) -> Tuple[TrainConfig, MicroMLLM, MicroMLLM, int]:
    """Rebuild (config, student, teacher, step) from an LVCK checkpoint."""
    header, tensors = load_checkpoint(path)
    if "config" not in header:
        raise FormatError("checkpoint header has no config block", str(path))
    try:
        config = TrainConfig.model_validate(header["config"])
    except ValidationError as e:
        raise FormatError(f"checkpoint config is invalid: {e}", str(path))
    models = []
    for namespace in ("student", "teacher"):
        prefix = f"{namespace}/"
        state_dict = {name[len(prefix):]: t for name, t in tensors.items() if name.startswith(prefix)}
        model = MicroMLLM(config.model)
        try:
            model.load_state_dict(state_dict, strict=True)
        except RuntimeError as e:
            raise FormatError(f"{namespace} tensors do not fit the model: {e}", str(path))
        models.append(model)
    return config, models[0], models[1], int(header.get("step", 0))


# ── batch prefetch ────────────────────────────────────────────────────────────

class BatchPrefetcher:
    """Generates batches for steps [0, steps) on a worker thread into a bounded queue."""

    _DONE = object()
    POLL_SECONDS = 0.05

    def __init__(self, config: TrainConfig, queue_size: int):
        self.config = config
        self.queue: "queue.Queue" = queue.Queue(maxsize=max(1, queue_size))
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)

    def _put(self, item) -> bool:
        """Blocking put that gives up once the consumer has stopped."""
        while not self._stop.is_set():
            try:
                self.queue.put(item, timeout=self.POLL_SECONDS)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for step in range(self.config.steps):
                if not self._put((step, make_batch(self.config, step))):
                    return
        except Exception as e:  # surfaced on the consumer side
            self._put((None, e))
            return
        self._put((None, self._DONE))

    def __iter__(self) -> Iterator[SampleBatch]:
        self.thread.start()
        try:
            while True:
                step, item = self.queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self._stop.set()
            self.thread.join(timeout=1.0)


def batch_stream(config: TrainConfig, workers: int, queue_size: int) -> Iterator[SampleBatch]:
    if workers > 0 and not settings.DETERMINISTIC:
        logger.info(f"Prefetching batches on a worker thread (queue size {queue_size})")
        return iter(BatchPrefetcher(config, queue_size))
    return (make_batch(config, step) for step in range(config.steps))


# ── full run ──────────────────────────────────────────────────────────────────

@dataclass
class RunResult:
    checkpoint: Path
    metrics: Path
    records: List[MetricRecord] = field(default_factory=list)


def run_training(
    config: TrainConfig,
    out_dir: Union[str, Path],
    prefetch_workers: Optional[int] = None,
    queue_size: Optional[int] = None,
) -> RunResult:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FormatError(f"cannot create output directory: {e}", str(out))
    workers = settings.PREFETCH_WORKERS if prefetch_workers is None else prefetch_workers
    size = settings.QUEUE_SIZE if queue_size is None else queue_size

    state = init_state(config)
    probe = probe_batch(config)
    logger.info(f"Training {config.mode.value} for {config.steps} steps, active losses {', '.join(config.active_losses)}")

    metrics_path = out / METRICS_FILE
    result = RunResult(checkpoint=out / CHECKPOINT_FILE, metrics=metrics_path)
    try:
        with open(metrics_path, "w", encoding="utf-8") as metrics:
            for batch in batch_stream(config, workers, size):
                record = train_step(state, batch)
                at_diag = state.step % config.diag_every == 0
                if at_diag:
                    measured = probe_metrics(state.model, config, probe)
                    record = record.model_copy(
                        update={k: measured[k] for k in ("cosine_profile", "attention_allocation", "accuracy")}
                    )
                    state.last_record = record
                    logger.info(
                        f"step {state.step}: accuracy {record.accuracy:.3f}, deep-layer cosine {record.cosine_profile[-1]:.4f}"
                    )
                if at_diag or state.step % config.log_every == 0 or state.step == config.steps:
                    metrics.write(record.model_dump_json() + "\n")
                    result.records.append(record)
    except OSError as e:
        raise FormatError(f"cannot write metrics: {e}", str(metrics_path))

    save_state(state, result.checkpoint)
    accuracy = evaluate_accuracy(state.model, config, probe)
    logger.info(f"Finished {state.step} steps with probe accuracy {accuracy:.3f}; metrics in {metrics_path}")
    return result
