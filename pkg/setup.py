#!/usr/bin/env python3
"""
Stability Audit Setup Script
学習安定性監査エンジンのセットアップ
"""

import subprocess
import sys
from pathlib import Path


EXAMPLE_CONFIGS = ("quadratic_lr_spike.yaml", "mlp_sign_flip.yaml", "bandit_reward_noise.yaml", "full_matrix.yaml")


def install_requirements():
    """必要なパッケージをインストール"""
    print("Installing Python packages...")
    subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])


def create_env_file():
    """環境変数設定ファイルを作成"""
    env_file = Path(".env")
    if not env_file.exists():
        print("Creating .env file...")
        env_content = """# 監査シードの上書き（カンマ区切り、空なら設定ファイルの seeds を使用）
SB_SEED=
"""
        env_file.write_text(env_content)


def check_example_configs():
    """サンプル設定の存在確認"""
    missing = [name for name in EXAMPLE_CONFIGS if not (Path("configs") / name).exists()]
    if missing:
        raise FileNotFoundError(f"missing example configs: {', '.join(missing)}")
    Path("artifacts").mkdir(exist_ok=True)


def main():
    """メインセットアップ処理"""
    print("=== Stability Audit Setup ===")

    try:
        install_requirements()
        create_env_file()
        check_example_configs()

        print("\n✓ Setup completed successfully!")
        print("\nNext steps:")
        print("1. Run: python main.py run configs/quadratic_lr_spike.yaml")
        print("2. Verify: python main.py replay artifacts/<run-dir>")
        print("3. Run: python main.py --help")

    except Exception as e:
        print(f"✗ Setup failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
