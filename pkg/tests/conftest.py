import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stepreuse import diffusion as dd
from stepreuse.motion import MotionNets
from stepreuse.pipeline import ModelStack, PipelineConfig
from stepreuse.selector import train_dss
from stepreuse.training import MtnTrainConfig, build_dss_dataset, train_mtn
from stepreuse.video import default_spec, generate_clip


def make_tiny_config(**overrides) -> PipelineConfig:
    base = dict(T=30, frames=6, reference_frames=3, candidate_step=5,
                train_clips=6, train_frames=4, diffusion_epochs=6,
                unet_base=8, mtn_clips=3, mtn_frames=6,
                mtn_stage1_epochs=2, mtn_stage2_epochs=3, mtn_stage3_epochs=3,
                dss_clips=8, dss_frames=3, dss_epochs=5, dss_hidden=16)
    base.update(overrides)
    return PipelineConfig(**base).validate()


def train_stack(config: PipelineConfig, out_dir: Path, seed=0) -> ModelStack:
    codec = config.make_codec()
    schedule = config.make_schedule()
    latents = []
    for k in range(config.train_clips):
        clip = generate_clip(default_spec(sigma=float(k % 4), seed=seed * 1000 + k),
                             frames=config.train_frames, seed=seed * 1000 + k,
                             canvas=config.canvas)
        latents.extend(codec.encode_clip(clip))
    model, _ = dd.train_denoiser(latents, schedule, epochs=config.diffusion_epochs,
                                 seed=seed, batch_size=config.diffusion_batch,
                                 lr=config.diffusion_lr, base=config.unet_base)
    dd.save_denoiser(out_dir / "diffusion", model, schedule)

    side = config.canvas // config.down_factor
    nets = MotionNets(tap_shapes=model.tap_shapes(side, side), tau=config.tau,
                      seed=seed)
    clips = []
    for k in range(config.mtn_clips):
        clip = generate_clip(default_spec(sigma=float(k % 2), seed=seed * 500 + k),
                             frames=config.mtn_frames, seed=seed * 500 + k,
                             canvas=config.canvas)
        clips.append(codec.encode_clip(clip))
    mtn_cfg = MtnTrainConfig(stage1_epochs=config.mtn_stage1_epochs,
                             stage2_epochs=config.mtn_stage2_epochs,
                             stage3_epochs=config.mtn_stage3_epochs)
    nets, _, _ = train_mtn(clips, model, schedule, nets, config.candidates(),
                           beta=config.weight_beta(), config=mtn_cfg, seed=seed,
                           reference_frames=config.reference_frames)
    nets.save(out_dir / "mtn")

    samples, _ = build_dss_dataset(model, schedule, nets, codec,
                                   config.candidates(), beta=config.weight_beta(),
                                   n_clips=config.dss_clips,
                                   frames_per_clip=config.dss_frames, seed=seed)
    selector, _ = train_dss(samples, mask_rate=config.mask_rate,
                            epochs=config.dss_epochs, seed=seed,
                            hidden=config.dss_hidden, lr=config.dss_lr)
    selector.save(out_dir / "dss", mask_rate=config.mask_rate)

    config.diffusion_ckpt = str(out_dir / "diffusion")
    config.mtn_ckpt = str(out_dir / "mtn")
    config.dss_ckpt = str(out_dir / "dss")
    return ModelStack(model=model, schedule=schedule, nets=nets,
                      selector=selector, codec=codec)


@pytest.fixture(scope="session")
def tiny_rig(tmp_path_factory):
    """A small but complete trained stack shared across pipeline/CLI tests."""
    out_dir = tmp_path_factory.mktemp("tiny_stack")
    config = make_tiny_config()
    stack = train_stack(config, out_dir, seed=0)
    return stack, config, out_dir
