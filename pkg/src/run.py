# /src/run.py
# Точка входа командной строки obsint

import argparse
import sys
from datetime import datetime, timezone
from typing import List, Optional

from src.logger import setup_logger
from src.services.runner import COMMANDS, run_command


def build_parser() -> argparse.ArgumentParser:
    """Парсер аргументов: команда + конфигурация эксперимента + переопределения"""
    parser = argparse.ArgumentParser(
        prog="obsint",
        description="Обучение уточнения IMU измерений на наблюдаемых членах преинтеграции",
    )
    parser.add_argument("command", choices=COMMANDS, help="Команда эксперимента")
    parser.add_argument("--config", required=True, help="JSON файл эксперимента")
    parser.add_argument("--seed", type=int, default=None, help="Seed эксперимента (переопределяет файл)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Переопределение поля конфигурации (можно повторять)"
    )
    parser.add_argument("--checkpoint", default=None, help="Чекпоинт сети (eval, predict)")
    parser.add_argument("--horizon", type=float, default=None, help="Горизонт предсказания, с (predict)")
    parser.add_argument("--resume", action="store_true", help="Продолжить обучение с train_state.json (train)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Главная функция CLI

    Returns:
        Код возврата (0 - успех, 1 - ошибка)
    """
    args = build_parser().parse_args(argv)
    logger = setup_logger(__name__)

    logger.info(f"🧭 obsint {args.command}")
    logger.info(f"⏰ Запуск: {datetime.now(timezone.utc).isoformat()}")

    if args.command == "predict" and args.checkpoint is None:
        logger.error("💔 predict требует --checkpoint")
        return 1

    try:
        results = run_command(
            args.command,
            args.config,
            overrides=args.overrides,
            seed=args.seed,
            checkpoint=args.checkpoint,
            horizon=args.horizon,
            resume=args.resume,
        )
    except Exception as e:
        logger.error(f"💥 Критическая ошибка: {e}")
        return 1

    if results["success"]:
        logger.info("🎉 Команда завершена успешно")
        return 0

    logger.error("💔 Команда завершена с ошибками")
    if "error" in results:
        logger.error(f"  - {results['error']}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
