fn main() {
    std::process::exit(zeta_gibbs::cli::main_with(std::env::args()));
}
