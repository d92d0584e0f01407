#!/usr/bin/env python3
"""
Setup script for Graph-S4 Normative Screening
This script helps initialize the development environment
"""

import os
import subprocess
import sys
from pathlib import Path

PACKAGE_DIR = Path('graphs4')


def run_command(command, cwd=None):
    """Run a shell command and return the result"""
    try:
        result = subprocess.run(
            command,
            shell=True,
            check=True,
            capture_output=True,
            text=True,
            cwd=cwd
        )
        return result.stdout
    except subprocess.CalledProcessError as e:
        print(f"Error running command: {command}")
        print(f"Error: {e.stderr}")
        return None


def check_requirements():
    """Check the interpreter version"""
    print("🔍 Checking requirements...")

    if sys.version_info < (3, 9):
        print(f"❌ python: {sys.version.split()[0]} (3.9+ required)")
        return False

    print(f"✅ python: {sys.version.split()[0]}")
    return True


def setup_environment():
    """Set up environment files"""
    print("\n🔧 Setting up environment...")

    env_file = PACKAGE_DIR / '.env'
    if not env_file.exists():
        print("Creating .env file...")
        env_file.write_text((PACKAGE_DIR / '.env.example').read_text())
        print("✅ Created .env file from template")
    else:
        print("✅ .env file already exists")


def setup_package():
    """Create a virtual environment and install dependencies"""
    print("\n🐍 Setting up Python environment...")

    if not PACKAGE_DIR.exists():
        print("❌ Package directory not found")
        return False

    venv_path = PACKAGE_DIR / 'venv'
    if not venv_path.exists():
        print("Creating virtual environment...")
        run_command(f'"{sys.executable}" -m venv venv', cwd=PACKAGE_DIR)

    print("Installing Python dependencies...")
    if os.name == 'nt':  # Windows
        pip_cmd = 'venv\\Scripts\\pip install -r requirements.txt'
    else:  # Unix/Linux/Mac
        pip_cmd = 'venv/bin/pip install -r requirements.txt'

    result = run_command(pip_cmd, cwd=PACKAGE_DIR)
    if result is not None:
        print("✅ Python dependencies installed")
        return True
    else:
        print("❌ Failed to install Python dependencies")
        return False


def main():
    """Main setup function"""
    print("🚀 Graph-S4 Normative Screening Setup")
    print("=" * 50)

    if not check_requirements():
        sys.exit(1)

    setup_environment()

    if not setup_package():
        print("❌ Setup failed")
        sys.exit(1)

    print("\n🎉 Setup completed successfully!")
    print("\nNext steps:")
    print("1. Review graphs4/.env and graphs4/configs/default.json")
    print("2. cd graphs4 && venv/bin/python main.py synth")
    print("3. Continue with: pretrain, screen, finetune, eval")
    print("4. Run the test suite with: venv/bin/pytest")


if __name__ == "__main__":
    main()
