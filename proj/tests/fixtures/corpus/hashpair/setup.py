from setuptools import setup, find_packages

setup(
    name='hashpair',
    version='1.6.0',
    description='Utilities for hashpair',
    author='Example Maintainers',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.8',
    install_requires=['requests>=2.0'],
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
    ],
)
