# /scripts/check_euroc.py

import argparse
import os
import sys

import numpy as np
from dotenv import load_dotenv

# Добавляем корневую папку в путь для импорта модулей
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

IMU_RELATIVE = os.path.join("mav0", "imu0", "data.csv")
GT_RELATIVE = os.path.join("mav0", "state_groundtruth_estimate0", "data.csv")


def main():
    """Ручная проверка настоящей последовательности EuRoC (MH_01_easy и т.п.)"""
    load_dotenv()

    parser = argparse.ArgumentParser(description="Проверка последовательности EuRoC")
    parser.add_argument("sequence_dir", help="Каталог последовательности (содержит mav0/)")
    parser.add_argument("--checkpoint", default=None, help="Чекпоинт для сравнения raw/refined")
    parser.add_argument("--n-frames", type=int, default=10)
    args = parser.parse_args()

    from src.config import DataConfig, EvalConfig, EurocSource
    from src.services.datasets.source_fabric import load_dataset
    from src.services.evaluation.metrics import evaluate
    from src.services.learning.refine_net import load_checkpoint, refine_sequence

    print("🔍 Проверка последовательности EuRoC")
    print("=" * 50)

    imu_path = os.path.join(args.sequence_dir, IMU_RELATIVE)
    gt_path = os.path.join(args.sequence_dir, GT_RELATIVE)
    for path in (imu_path, gt_path):
        print(f"{'✅' if os.path.exists(path) else '❌'} {path}")

    try:
        dataset = load_dataset(DataConfig(euroc=EurocSource(imu_path=imu_path, gt_path=gt_path)))
    except Exception as e:
        print(f"❌ Ошибка загрузки: {e}")
        return 1

    dt = np.diff(dataset.imu.t)
    print(f"\n📊 Отсчетов после выравнивания: {len(dataset.imu)}")
    print(f"⏱️ Длительность: {dataset.duration:.2f} с, медианная частота {dataset.median_rate():.1f} Гц")
    print(f"⏱️ dt: min {dt.min() * 1e3:.3f} мс, max {dt.max() * 1e3:.3f} мс")
    print(f"🧭 |a| среднее: {np.linalg.norm(dataset.imu.accel, axis=1).mean():.3f} м/с²")
    print(f"🚀 |v| максимум: {np.linalg.norm(dataset.gt.v, axis=1).max():.3f} м/с")

    config = EvalConfig(n_frames=args.n_frames)
    reports = [evaluate(dataset, None, "raw", config)]
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        reports.append(evaluate(dataset, refine_sequence(checkpoint, dataset.imu), "refined", config))

    print("\n📏 Метрики:")
    for report in reports:
        print(f"  [{report.method}] rel_trans={report.rel_trans_rmse:.6f} м, "
              f"rel_rot={report.rel_rot_rmse:.6f} рад, traj={report.trajectory_rmse:.3f} м")
        for point in report.drift:
            print(f"    h={point.horizon:.1f} с: pos={point.pos_rmse:.4f} м, rot={point.rot_rmse:.5f} рад")
    return 0


if __name__ == "__main__":
    sys.exit(main())
