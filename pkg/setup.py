from setuptools import setup, find_packages

setup(
    name="vitdfq",
    version="1.0",
    packages=find_packages(exclude=['tests']),
    install_requires=['matplotlib', 'numpy', 'pandas', 'scipy', 'torch', 'pyyaml', 'tqdm', 'pillow'],
    extras_require={'test': ['pytest', 'hypothesis']},
    entry_points={'console_scripts': ['vitdfq=vitdfq.main:main']},
)
