"""Three-step alternating optimization: variational model, student, teacher.

Each iteration first updates the variational model (energy network via
contrastive loss on short-run MCMC negatives, or the Gaussian head via its
NLL), then the student on the algorithm-specific distillation loss plus
the weighted MI surrogate (reusing the negatives cached by the first
step), and finally -- in online mode -- the teacher generator and its
discriminator with a least-squares GAN loss plus L1 reconstruction.

Every random draw comes from a named stream derived from the master seed,
so switching the variational path off cannot shift the student or teacher
trajectories; with lambda_mi = 0 the first step is skipped entirely and
runs are bitwise identical to fully disabled ones.  Checkpoints capture
parameters, optimizer state, sampler RNG state, and the iteration counter,
making resume bitwise as well under deterministic numerics.
"""

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import losses as L
from . import metrics as M
from . import nets, objectives, sampler
from .config import echo_config
from .datagen import epoch_permutation, load_manifest, load_split
from .determinism import derive_seed, deterministic_requested, setup_determinism, torch_generator
from .errors import ConfigError, ModeError, NumericalAbort, SamplerDivergence, SequencingError

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "iteration", "lr_student", "lr_teacher", "lr_ebm",
    "loss_student_total", "loss_algo", "mi_surrogate", "loss_var",
    "energy_pos", "energy_neg", "loss_teacher_g", "loss_teacher_d",
    "toy_fid", "ssim_to_target", "l1_to_target", "psnr",
]

NONFINITE_ABORT_STREAK = 10


def lsgan_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return 0.5 * (((real_logits - 1.0) ** 2).mean() + (fake_logits**2).mean())


def lsgan_g(fake_logits: torch.Tensor) -> torch.Tensor:
    return ((fake_logits - 1.0) ** 2).mean()


def lr_at(lr0: float, iteration: int, total_iters: int) -> float:
    return lr0 * (1.0 - iteration / total_iters)


class TrainState:
    """Everything a run needs; built from a resolved flat config."""

    def __init__(self, cfg: dict, manifest: dict):
        self.cfg = cfg
        self.manifest = manifest
        self.iteration = 0
        self.mode = cfg["schedule.mode"]
        self.online = self.mode == "online-paired"
        self.paired = self.mode in ("online-paired", "offline-paired")
        seed = cfg["seed"]

        for key in ("schedule.lr_student", "schedule.lr_teacher", "schedule.lr_ebm"):
            if cfg[key] <= 0:
                raise ConfigError(f"{key} must be > 0, got {cfg[key]}")
        if cfg["schedule.total_iters"] < 1:
            raise ConfigError(f"schedule.total_iters must be >= 1, got {cfg['schedule.total_iters']}")
        if cfg["schedule.batch_size"] < 1:
            raise ConfigError(f"schedule.batch_size must be >= 1, got {cfg['schedule.batch_size']}")

        self.vem = objectives.VEMConfig(
            lambda_mi=cfg["vem.lambda_mi"], alpha_reg=cfg["vem.alpha_reg"],
            target_source=cfg["vem.target_source"], variational=cfg["vem.variational"],
            enabled=cfg["vem.enabled"],
        ).validate()
        if not self.paired and self.vem.target_source == "real":
            raise ConfigError(
                "vem.target_source='real' requires a paired mode; use 'teacher'"
            )
        self.distill = L.DistillConfig(
            algorithm=cfg["distill.algorithm"],
            lambda_cd=cfg["distill.lambda_cd"], lambda_tv=cfg["distill.lambda_tv"],
            lambda_ssim=cfg["distill.lambda_ssim"], lambda_pl=cfg["distill.lambda_pl"],
            lambda_recon=cfg["distill.lambda_recon"], lambda_mse=cfg["distill.lambda_mse"],
            lambda_style=cfg["distill.lambda_style"], lambda_distill=cfg["distill.lambda_distill"],
            lambda_ka=cfg["distill.lambda_ka"], lambda_lpips=cfg["distill.lambda_lpips"],
        ).validate()
        self.sampler_cfg = sampler.SamplerConfig(
            num_steps=cfg["sampler.steps"], step_size=cfg["sampler.step_size"],
            noise_std=cfg["sampler.noise_std"], init_strategy=cfg["sampler.init"],
            clamp_range=cfg["sampler.clamp"],
        ).validate()

        image_size = manifest["image_size"]
        channels = manifest["channels"]
        teacher_spec = nets.GeneratorSpec(
            family=cfg["model.family"], base_width=cfg["model.width"],
            width_multiplier=1.0, in_channels=channels, out_channels=channels,
            image_size=image_size,
        )
        student_spec = teacher_spec.student(cfg["model.student_multiplier"])
        self.teacher = nets.build_generator(teacher_spec, derive_seed(seed, "teacher"))
        self.student = nets.build_generator(student_spec, derive_seed(seed, "student"))
        tap_names = cfg["distill.taps"] or type(self.teacher).TAP_NAMES
        known = type(self.teacher).TAP_NAMES
        for name in tap_names:
            if name not in known:
                raise ConfigError(f"distill.taps entry {name!r} not in {known}")
        self.tap_indices = [known.index(name) for name in tap_names]
        self.adapters = L.ChannelAdapters(
            [self.student.tap_channels[i] for i in self.tap_indices],
            [self.teacher.tap_channels[i] for i in self.tap_indices],
            seed=derive_seed(seed, "adapters"),
        )
        disc_spec = nets.DiscriminatorSpec(
            depth=cfg["model.disc_depth"], base_width=cfg["model.disc_width"],
            in_channels=2 * channels,
        )
        self.disc_teacher = None
        self.opt_disc_teacher = None
        betas = (0.5, 0.999)
        if self.online or self.distill.algorithm == "gcc":
            self.disc_teacher = nets.build_discriminator(disc_spec, derive_seed(seed, "disc_teacher"))
        self.disc_student = None
        self.opt_disc_student = None
        if self.distill.algorithm in ("gan-compression", "cat", "cagc"):
            self.disc_student = nets.build_discriminator(disc_spec, derive_seed(seed, "disc_student"))
            self.opt_disc_student = torch.optim.Adam(
                self.disc_student.parameters(), lr=cfg["schedule.lr_student"], betas=betas
            )

        self.ebm = None
        self.vid_head = None
        self.opt_var = None
        self.use_vem = self.vem.enabled and self.vem.lambda_mi > 0
        if self.use_vem:
            if self.vem.variational == "ebm":
                from .energy import EnergyModelConfig, build_energy_model

                ebm_cfg = EnergyModelConfig(
                    base_channels=cfg["ebm.base_channels"],
                    num_res_blocks=cfg["ebm.num_res_blocks"],
                    leaky_slope=cfg["ebm.leaky_slope"],
                    sn_power_iters=cfg["ebm.sn_power_iters"],
                    input_channels=channels,
                )
                self.ebm = build_energy_model(ebm_cfg, derive_seed(seed, "ebm"))
                self.opt_var = torch.optim.Adam(
                    self.ebm.parameters(), lr=cfg["schedule.lr_ebm"], betas=betas
                )
            else:
                self.vid_head = objectives.GaussianVariationalHead(
                    channels, seed=derive_seed(seed, "vid")
                )
                self.opt_var = torch.optim.Adam(
                    self.vid_head.parameters(), lr=cfg["schedule.lr_ebm"], betas=betas
                )

        self.opt_student = torch.optim.Adam(
            list(self.student.parameters()) + list(self.adapters.parameters()),
            lr=cfg["schedule.lr_student"], betas=betas,
        )
        self.opt_teacher = None
        if self.online:
            self.opt_teacher = torch.optim.Adam(
                self.teacher.parameters(), lr=cfg["schedule.lr_teacher"], betas=betas
            )
            self.opt_disc_teacher = torch.optim.Adam(
                self.disc_teacher.parameters(), lr=cfg["schedule.lr_teacher"], betas=betas
            )
        else:
            for p in self.teacher.parameters():
                p.requires_grad_(False)
            self.teacher.eval()
            teacher_ckpt = cfg["schedule.teacher_ckpt"]
            if teacher_ckpt:
                arrays, _, _, _ = ckpt.load_checkpoint(teacher_ckpt)
                ckpt.load_module_arrays("teacher", self.teacher, arrays)
                if self.disc_teacher is not None and any(
                    k.startswith("disc_teacher.") for k in arrays
                ):
                    ckpt.load_module_arrays("disc_teacher", self.disc_teacher, arrays)
            if self.disc_teacher is not None:
                for p in self.disc_teacher.parameters():
                    p.requires_grad_(False)

        self.buffer = None
        if self.sampler_cfg.init_strategy == "persistent" and self.use_vem and self.ebm is not None:
            self.buffer = sampler.PersistentBuffer(
                capacity=cfg["sampler.buffer_capacity"],
                image_shape=(channels, image_size, image_size),
                reinit_prob=cfg["sampler.buffer_reinit_prob"],
                rng=torch_generator(seed, "buffer"),
            )

        self.embedder = M.build_toy_embedder()
        self.gen_sampler = torch_generator(seed, "sampler")
        self.data_seed = derive_seed(seed, "data")
        self.cached_negatives = None  # (iteration, t_neg, t_target)

    # -- parameter bookkeeping -------------------------------------------
    def parameter_groups(self) -> dict:
        groups = {
            "student": list(self.student.parameters()) + list(self.adapters.parameters()),
            "teacher": list(self.teacher.parameters()),
        }
        if self.disc_teacher is not None:
            groups["teacher"] += list(self.disc_teacher.parameters())
        if self.disc_student is not None:
            groups["student"] += list(self.disc_student.parameters())
        if self.ebm is not None:
            groups["variational"] = list(self.ebm.parameters())
        elif self.vid_head is not None:
            groups["variational"] = list(self.vid_head.parameters())
        return groups

    def mi_target(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if self.vem.target_source == "real" and self.paired:
            return y
        with torch.no_grad():
            return self.teacher(x)

    def checkpoint_arrays(self) -> dict:
        arrays = {}
        arrays.update(ckpt.module_arrays("student", self.student))
        arrays.update(ckpt.module_arrays("adapters", self.adapters))
        arrays.update(ckpt.module_arrays("teacher", self.teacher))
        arrays.update(ckpt.optimizer_arrays("opt_student", self.opt_student))
        if self.disc_teacher is not None:
            arrays.update(ckpt.module_arrays("disc_teacher", self.disc_teacher))
        if self.opt_teacher is not None:
            arrays.update(ckpt.optimizer_arrays("opt_teacher", self.opt_teacher))
            arrays.update(ckpt.optimizer_arrays("opt_disc_teacher", self.opt_disc_teacher))
        if self.disc_student is not None:
            arrays.update(ckpt.module_arrays("disc_student", self.disc_student))
            arrays.update(ckpt.optimizer_arrays("opt_disc_student", self.opt_disc_student))
        if self.ebm is not None:
            arrays.update(ckpt.module_arrays("ebm", self.ebm))
        if self.vid_head is not None:
            arrays.update(ckpt.module_arrays("vid_head", self.vid_head))
        if self.opt_var is not None:
            arrays.update(ckpt.optimizer_arrays("opt_var", self.opt_var))
        if self.buffer is not None:
            arrays["buffer.slots"] = self.buffer.slots
        return arrays

    def save(self, directory) -> Path:
        rng = {"sampler": self.gen_sampler.get_state().numpy().tobytes()}
        meta = {"mode": self.mode, "algorithm": self.distill.algorithm}
        return ckpt.save_checkpoint(
            directory, self.checkpoint_arrays(), rng, self.iteration, meta
        )

    def load(self, directory) -> None:
        arrays, rng, iteration, _ = ckpt.load_checkpoint(directory)
        ckpt.load_module_arrays("student", self.student, arrays)
        ckpt.load_module_arrays("adapters", self.adapters, arrays)
        ckpt.load_module_arrays("teacher", self.teacher, arrays)
        ckpt.load_optimizer_arrays("opt_student", self.opt_student, arrays)
        if self.disc_teacher is not None and any(k.startswith("disc_teacher.") for k in arrays):
            ckpt.load_module_arrays("disc_teacher", self.disc_teacher, arrays)
        if self.opt_teacher is not None:
            ckpt.load_optimizer_arrays("opt_teacher", self.opt_teacher, arrays)
            ckpt.load_optimizer_arrays("opt_disc_teacher", self.opt_disc_teacher, arrays)
        if self.disc_student is not None:
            ckpt.load_module_arrays("disc_student", self.disc_student, arrays)
            ckpt.load_optimizer_arrays("opt_disc_student", self.opt_disc_student, arrays)
        if self.ebm is not None:
            ckpt.load_module_arrays("ebm", self.ebm, arrays)
        if self.vid_head is not None:
            ckpt.load_module_arrays("vid_head", self.vid_head, arrays)
        if self.opt_var is not None:
            ckpt.load_optimizer_arrays("opt_var", self.opt_var, arrays)
        if self.buffer is not None and "buffer.slots" in arrays:
            self.buffer.slots = torch.from_numpy(arrays["buffer.slots"]).float()
        if "sampler" in rng:
            state = torch.from_numpy(
                np.frombuffer(rng["sampler"], dtype=np.uint8).copy()
            )
            self.gen_sampler.set_state(state)
        self.iteration = iteration


def step_ebm(state: TrainState, batch) -> dict:
    """Update the variational model (energy network or Gaussian head) and
    cache the negatives for the student step of the same iteration."""
    x, y = batch
    with torch.no_grad():
        s = state.student(x)
    t = state.mi_target(x, y)
    record = {}
    if state.ebm is not None:
        init_src = None
        if state.sampler_cfg.init_strategy == "teacher":
            init_src = t
        elif state.sampler_cfg.init_strategy == "persistent":
            init_src = state.buffer
        chain = sampler.run_chain(s, state.ebm, state.sampler_cfg, init_src, state.gen_sampler)
        state.ebm.train(True)
        loss = objectives.ebm_loss(state.ebm, t, s, chain.final, state.vem.alpha_reg)
        state.ebm.train(False)
        state.opt_var.zero_grad()
        loss.backward()
        state.opt_var.step()
        with torch.no_grad():
            e_pos = state.ebm(t, s).mean().item()
        record["loss_var"] = loss.item()
        record["energy_pos"] = e_pos
        record["energy_neg"] = chain.energies[-1]
        state.cached_negatives = (state.iteration, chain.final, t)
    else:
        loss = objectives.vid_nll(state.vid_head, t, s)
        state.opt_var.zero_grad()
        loss.backward()
        state.opt_var.step()
        record["loss_var"] = loss.item()
        state.cached_negatives = (state.iteration, None, t)
    return record


def _algorithm_loss(state: TrainState, x, y, s_out, s_feats, t_out, t_feats) -> torch.Tensor:
    cfg = state.distill
    algo = cfg.algorithm
    if algo == "omgd":
        return L.omgd_loss(t_out, s_out, t_feats, s_feats, state.adapters, cfg, state.embedder)
    if algo == "gcc":
        if state.disc_teacher is None:
            raise ConfigError("gcc requires a teacher discriminator")
        with objectives.frozen_params(state.disc_teacher):
            logits_s, taps_s = state.disc_teacher.forward_with_taps(torch.cat([x, s_out], dim=1))
            with torch.no_grad():
                _, taps_t = state.disc_teacher.forward_with_taps(torch.cat([x, t_out], dim=1))
            loss = L.gcc_loss(t_out, s_out, taps_t, taps_s, t_feats, s_feats, state.adapters, cfg)
            return loss + state.cfg["schedule.lambda_gan"] * lsgan_g(logits_s)
    if algo == "gan-compression":
        loss = L.gan_compression_loss(
            s_out, t_out, t_feats, s_feats, state.adapters, cfg,
            ground_truth=y if state.paired else None, paired=state.paired,
        )
    elif algo == "cat":
        # kernel alignment compares Gram kernels, so no channel adapters needed
        recon_target = y if state.paired else t_out
        loss = cfg.lambda_recon * L.l1_mean(s_out, recon_target) + cfg.lambda_ka * L.cat_ka_loss(
            t_feats, s_feats
        )
    elif algo == "cagc":
        mask = torch.ones_like(s_out[:, :1])
        loss = L.cagc_loss(
            t_out, s_out, t_feats, s_feats, state.adapters, mask, cfg, state.embedder
        )
    else:  # pragma: no cover - guarded by DistillConfig.validate
        raise ConfigError(f"unknown algorithm {algo!r}")
    # offline suites add a student-side adversarial term
    real_target = y if state.paired else t_out
    d_real = state.disc_student(torch.cat([x, real_target], dim=1))
    d_fake = state.disc_student(torch.cat([x, s_out.detach()], dim=1))
    d_loss = lsgan_d(d_real, d_fake)
    state.opt_disc_student.zero_grad()
    d_loss.backward()
    state.opt_disc_student.step()
    with objectives.frozen_params(state.disc_student):
        g_logits = state.disc_student(torch.cat([x, s_out], dim=1))
    return loss + state.cfg["schedule.lambda_gan"] * lsgan_g(g_logits)


def step_student(state: TrainState, batch) -> dict:
    x, y = batch
    s_out, s_feats = state.student.forward_with_features(x)
    with torch.no_grad():
        t_out, t_feats = state.teacher.forward_with_features(x)
    s_feats = [s_feats[i] for i in state.tap_indices]
    t_feats = [t_feats[i] for i in state.tap_indices]
    l_algo = _algorithm_loss(state, x, y, s_out, s_feats, t_out, t_feats)
    record = {"loss_algo": l_algo.item()}
    if state.use_vem:
        if state.cached_negatives is None or state.cached_negatives[0] != state.iteration:
            raise SequencingError(
                f"student step at iteration {state.iteration} has no cached negatives"
            )
        _, t_neg, t_target = state.cached_negatives
        if state.ebm is not None:
            mi = objectives.student_mi_surrogate(state.ebm, t_target, s_out, t_neg)
        else:
            with objectives.frozen_params(state.vid_head):
                mi = objectives.vid_nll(state.vid_head, t_target, s_out)
        total = objectives.combined_student_loss(l_algo, mi, state.vem.lambda_mi)
        record["mi_surrogate"] = mi.item()
    else:
        total = l_algo
    record["loss_student_total"] = total.item()
    state.opt_student.zero_grad()
    total.backward()
    state.opt_student.step()
    return record


def step_teacher(state: TrainState, batch) -> dict:
    if not state.online:
        raise ModeError(f"teacher step is only available in online mode, not {state.mode!r}")
    x, y = batch
    with torch.no_grad():
        fake = state.teacher(x)
    d_loss = lsgan_d(
        state.disc_teacher(torch.cat([x, y], dim=1)),
        state.disc_teacher(torch.cat([x, fake], dim=1)),
    )
    state.opt_disc_teacher.zero_grad()
    d_loss.backward()
    state.opt_disc_teacher.step()

    fake = state.teacher(x)
    with objectives.frozen_params(state.disc_teacher):
        logits = state.disc_teacher(torch.cat([x, fake], dim=1))
    g_loss = state.cfg["schedule.lambda_gan"] * lsgan_g(logits) + state.cfg[
        "schedule.lambda_rec"
    ] * L.l1_mean(fake, y)
    state.opt_teacher.zero_grad()
    g_loss.backward()
    state.opt_teacher.step()
    return {"loss_teacher_g": g_loss.item(), "loss_teacher_d": d_loss.item()}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_row(record: dict) -> str:
    return ",".join(_fmt(record.get(col)) for col in CSV_COLUMNS) + "\n"


def batch_for_iteration(x, y, batch_size: int, data_seed: int, iteration: int):
    n = x.shape[0]
    per_epoch = n // batch_size
    if per_epoch < 1:
        raise ConfigError(f"batch_size {batch_size} exceeds split size {n}")
    epoch, offset = divmod(iteration, per_epoch)
    perm = epoch_permutation(n, data_seed, epoch)
    idx = perm[offset * batch_size : (offset + 1) * batch_size]
    return x[idx], y[idx]


def _truncate_csv(path: Path, max_iteration: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    if not lines:
        path.write_text(",".join(CSV_COLUMNS) + "\n")
        return
    kept = [lines[0]]
    for line in lines[1:]:
        first = line.split(",", 1)[0]
        if first and int(first) <= max_iteration:
            kept.append(line)
    path.write_text("".join(kept))


def run(cfg: dict, resume=None) -> dict:
    """Execute a full training run; returns a summary dict with paths."""
    setup_determinism(deterministic_requested(cfg["deterministic"]))
    torch.manual_seed(derive_seed(cfg["seed"], "global"))
    manifest = load_manifest(cfg["data.path"])
    x_train, y_train = load_split(manifest, "train")
    state = TrainState(cfg, manifest)

    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    csv_path = out_dir / "metrics.csv"

    if resume:
        state.load(resume)
        if not csv_path.exists():
            csv_path.write_text(",".join(CSV_COLUMNS) + "\n")
        _truncate_csv(csv_path, state.iteration)
        csv_file = open(csv_path, "a")
    else:
        csv_file = open(csv_path, "w")
        csv_file.write(",".join(CSV_COLUMNS) + "\n")

    total = cfg["schedule.total_iters"]
    if state.iteration >= total:
        raise ConfigError(f"resume iteration {state.iteration} >= total_iters {total}")
    eval_every = cfg["schedule.eval_every"]
    ckpt_every = cfg["schedule.checkpoint_every"]
    log_every = max(1, cfg["schedule.log_every"])
    batch_size = cfg["schedule.batch_size"]
    nonfinite_streak = 0
    last_good = None
    progress_every = max(1, total // 10)

    def reference_kwargs():
        if state.mode == "offline-unpaired-teacher-target":
            return {"reference": "teacher", "teacher": state.teacher}
        return {"reference": "target"}

    def run_eval(record):
        report = M.evaluate(state.student, manifest, state.embedder, **reference_kwargs())
        record.update(
            toy_fid=report["toy_fid"], ssim_to_target=report["ssim_to_target"],
            l1_to_target=report["l1_to_target"], psnr=report["psnr"],
        )
        eval_dir = out_dir / "eval"
        eval_dir.mkdir(exist_ok=True)
        (eval_dir / f"iter_{state.iteration:07d}.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n"
        )
        return report

    last_report = None
    try:
        while state.iteration < total:
            i = state.iteration
            lr_s = lr_at(cfg["schedule.lr_student"], i, total)
            lr_t = lr_at(cfg["schedule.lr_teacher"], i, total)
            lr_e = lr_at(cfg["schedule.lr_ebm"], i, total)
            for group in state.opt_student.param_groups:
                group["lr"] = lr_s
            if state.opt_disc_student is not None:
                for group in state.opt_disc_student.param_groups:
                    group["lr"] = lr_s
            if state.opt_teacher is not None:
                for group in state.opt_teacher.param_groups:
                    group["lr"] = lr_t
                for group in state.opt_disc_teacher.param_groups:
                    group["lr"] = lr_t
            if state.opt_var is not None:
                for group in state.opt_var.param_groups:
                    group["lr"] = lr_e

            batch = batch_for_iteration(x_train, y_train, batch_size, state.data_seed, i)
            record = {"iteration": i + 1, "lr_student": lr_s}
            if state.online:
                record["lr_teacher"] = lr_t
            diverged = False
            if state.use_vem:
                record["lr_ebm"] = lr_e
                try:
                    record.update(step_ebm(state, batch))
                except SamplerDivergence as exc:
                    logger.warning(
                        "iteration %d: sampler diverged at step %d; skipping iteration",
                        i + 1, exc.step_index,
                    )
                    diverged = True
            if not diverged:
                record.update(step_student(state, batch))
                if state.online:
                    record.update(step_teacher(state, batch))

            checked = [
                record.get(k)
                for k in ("loss_student_total", "loss_var", "loss_teacher_g", "loss_teacher_d")
                if record.get(k) is not None
            ]
            if diverged or any(not math.isfinite(v) for v in checked):
                nonfinite_streak += 1
            else:
                nonfinite_streak = 0

            state.iteration = i + 1
            if nonfinite_streak >= NONFINITE_ABORT_STREAK:
                csv_file.write(_csv_row(record))
                raise NumericalAbort(
                    f"non-finite losses for {nonfinite_streak} consecutive iterations "
                    f"(last good checkpoint: {last_good})"
                )

            if eval_every and state.iteration % eval_every == 0 and state.iteration < total:
                last_report = run_eval(record)
            if state.iteration == total:
                last_report = run_eval(record)
            if state.iteration % log_every == 0 or state.iteration == total:
                csv_file.write(_csv_row(record))
                csv_file.flush()
            if ckpt_every and state.iteration % ckpt_every == 0 and state.iteration < total:
                last_good = state.save(out_dir / f"ckpt_{state.iteration:07d}")
            if state.iteration % progress_every == 0:
                logger.info(
                    "iter %d/%d student=%s", state.iteration, total,
                    record.get("loss_student_total"),
                )
    finally:
        csv_file.close()

    final_ckpt = state.save(out_dir / "ckpt_final")
    return {
        "output_dir": str(out_dir),
        "csv": str(csv_path),
        "final_checkpoint": str(final_ckpt),
        "final_eval": last_report,
        "iterations": state.iteration,
    }
