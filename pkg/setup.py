"""
Setup Script for bundlegraph
Installs the packages and the bundlegraph command
"""
from setuptools import setup


def read_requirements():
    """Runtime requirements, without the test-only pins"""
    with open('requirements.txt', encoding='utf-8') as handle:
        lines = [line.strip() for line in handle]
    return [line for line in lines if line and not line.startswith(('#', 'pytest'))]


setup(
    name='bundlegraph',
    version='0.1.0',
    description='Multi-view graph bundle recommendation with early fusion and late contrast',
    python_requires='>=3.11',
    packages=['database', 'middleware', 'routes', 'services'],
    py_modules=['app', 'cli', 'config'],
    install_requires=read_requirements(),
    extras_require={'test': ['pytest==7.4.3']},
    entry_points={
        'console_scripts': [
            'bundlegraph=cli:cli',
        ],
    },
)
