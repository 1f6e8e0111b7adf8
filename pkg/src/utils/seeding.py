import numpy as np

# マスターシードから派生させる名前付きストリーム
STREAMS = {
    'train': 0,
    'rollout': 1,
    'sweep': 2,
    'oracle': 3,
    'certify': 4,
    'init': 5,
    'eval': 6,
}


def seed_sequence(master_seed: int, stream: str, *indices: int) -> np.random.SeedSequence:
    """
    (master_seed, stream, indices...) から決定論的に SeedSequence を作る

    同じ引数からは常に同じ乱数列が得られ、ストリーム同士は独立。
    """
    if stream not in STREAMS:
        raise KeyError(f"未知の乱数ストリーム: {stream}")
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(STREAMS[stream], *map(int, indices)))


def make_rng(master_seed: int, stream: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, stream, *indices)))


def derive_seed(master_seed: int, stream: str, *indices: int) -> int:
    """エピソード識別用の 63bit 整数シード"""
    return int(seed_sequence(master_seed, stream, *indices).generate_state(1, np.uint64)[0] >> np.uint64(1))
