#!/usr/bin/env python3
"""
Setup script for nicguard
Automates the initial setup process
"""

import os
import shutil
import subprocess
import sys
from pathlib import Path


def run_command(command, description):
    """Run a command and handle errors"""
    print(f"\n🔄 {description}...")
    try:
        subprocess.run(command, shell=True, check=True, capture_output=True, text=True)
        print(f"✅ {description} completed successfully")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ {description} failed: {e}")
        print(f"Error output: {e.stderr}")
        return False


def check_python_version():
    """Check if Python version is compatible"""
    if sys.version_info < (3, 8):
        print("❌ Python 3.8 or higher is required")
        return False
    print(f"✅ Python {sys.version_info.major}.{sys.version_info.minor} detected")
    return True


def create_virtual_environment():
    """Create virtual environment if it doesn't exist"""
    if Path(".venv").exists():
        print("✅ Virtual environment already exists")
        return True
    return run_command(f"{sys.executable} -m venv .venv", "Creating virtual environment")


def install_dependencies():
    """Install required dependencies"""
    if os.name == 'nt':  # Windows
        pip_cmd = ".venv\\Scripts\\pip install -r requirements.txt"
    else:
        pip_cmd = ".venv/bin/pip install -r requirements.txt"
    return run_command(pip_cmd, "Installing dependencies")


def create_directories():
    """Create necessary directories"""
    for directory in ["data", "outputs"]:
        Path(directory).mkdir(parents=True, exist_ok=True)
    print("✅ Directories created")


def create_env_file():
    """Create .env from env_template.txt if it doesn't exist"""
    if Path(".env").exists():
        print("✅ .env already exists")
        return True
    try:
        shutil.copyfile("env_template.txt", ".env")
        print("✅ .env created from env_template.txt")
        return True
    except OSError as e:
        print(f"❌ Failed to create .env: {e}")
        return False


def generate_sample_data():
    """Generate the synthetic image sets"""
    python = ".venv\\Scripts\\python" if os.name == 'nt' else ".venv/bin/python"
    return run_command(f"{python} training/data_preparation.py", "Generating synthetic data")


def main():
    """Main setup function"""
    print("🚀 Setting up nicguard...")

    if not check_python_version():
        sys.exit(1)

    create_directories()

    if not create_virtual_environment():
        print("❌ Setup failed at virtual environment creation")
        sys.exit(1)

    if not install_dependencies():
        print("❌ Setup failed at dependency installation")
        sys.exit(1)

    if not create_env_file():
        print("❌ Setup failed at .env creation")
        sys.exit(1)

    if not generate_sample_data():
        print("⚠️  Could not generate synthetic data; run training/data_preparation.py manually")

    print("\n🎉 Setup completed successfully!")
    print("\n📋 Next steps:")
    print("1. Activate your virtual environment:")
    if os.name == 'nt':
        print("   .venv\\Scripts\\activate")
    else:
        print("   source .venv/bin/activate")
    print("2. Train a baseline codec:")
    print("   python main.py train --dataset data/train --steps 10000")
    print("3. Run the tests:")
    print("   pytest")
    print("\n📚 For more information, check the README.md file")


if __name__ == "__main__":
    main()
